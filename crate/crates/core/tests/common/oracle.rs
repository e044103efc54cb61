//! Cell-by-cell Othello rules on an 8x8 array, sharing nothing with the
//! bitboard generator.

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Cell {
    Empty,
    Dark,
    Light,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Grid {
    pub cells: [[Cell; 8]; 8],
    pub dark_to_move: bool,
}

const DIRS: [(i32, i32); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

impl Grid {
    /// `cells[row][col]` with row 0 = rank 1, col 0 = file a.
    pub fn start() -> Grid {
        let mut cells = [[Cell::Empty; 8]; 8];
        cells[3][3] = Cell::Light; // d4
        cells[3][4] = Cell::Dark; // e4
        cells[4][3] = Cell::Dark; // d5
        cells[4][4] = Cell::Light; // e5
        Grid { cells, dark_to_move: true }
    }

    fn colors(&self, dark: bool) -> (Cell, Cell) {
        if dark {
            (Cell::Dark, Cell::Light)
        } else {
            (Cell::Light, Cell::Dark)
        }
    }

    fn flips(&self, row: usize, col: usize, dark: bool) -> Vec<(usize, usize)> {
        if self.cells[row][col] != Cell::Empty {
            return vec![];
        }
        let (own, opp) = self.colors(dark);
        let mut out = vec![];
        for (dr, dc) in DIRS {
            let mut line = vec![];
            let (mut r, mut c) = (row as i32 + dr, col as i32 + dc);
            while (0..8).contains(&r) && (0..8).contains(&c) && self.cells[r as usize][c as usize] == opp {
                line.push((r as usize, c as usize));
                r += dr;
                c += dc;
            }
            if !line.is_empty() && (0..8).contains(&r) && (0..8).contains(&c) && self.cells[r as usize][c as usize] == own {
                out.extend(line);
            }
        }
        out
    }

    /// Legal cells as `row * 8 + col`, ascending.
    pub fn moves_for(&self, dark: bool) -> Vec<u8> {
        let mut out = vec![];
        for row in 0..8 {
            for col in 0..8 {
                if !self.flips(row, col, dark).is_empty() {
                    out.push((row * 8 + col) as u8);
                }
            }
        }
        out
    }

    pub fn moves(&self) -> Vec<u8> {
        self.moves_for(self.dark_to_move)
    }

    /// Plays a legal cell, then passes back if the opponent cannot move.
    pub fn play(&mut self, cell: u8) {
        let (row, col) = (usize::from(cell / 8), usize::from(cell % 8));
        let flips = self.flips(row, col, self.dark_to_move);
        assert!(!flips.is_empty(), "oracle asked to play an illegal move");
        let (own, _) = self.colors(self.dark_to_move);
        self.cells[row][col] = own;
        for (r, c) in flips {
            self.cells[r][c] = own;
        }
        self.dark_to_move = !self.dark_to_move;
        if self.moves().is_empty() && !self.moves_for(!self.dark_to_move).is_empty() {
            self.dark_to_move = !self.dark_to_move;
        }
    }

    pub fn bitboards(&self) -> (u64, u64) {
        let mut dark = 0;
        let mut light = 0;
        for row in 0..8 {
            for col in 0..8 {
                match self.cells[row][col] {
                    Cell::Dark => dark |= 1u64 << (row * 8 + col),
                    Cell::Light => light |= 1u64 << (row * 8 + col),
                    Cell::Empty => {}
                }
            }
        }
        (dark, light)
    }

    pub fn is_over(&self) -> bool {
        self.moves_for(true).is_empty() && self.moves_for(false).is_empty()
    }
}

/// Move sequences of exactly `depth` plies; games ending early count once.
pub fn perft(g: &Grid, depth: u32) -> u64 {
    if depth == 0 || g.is_over() {
        return 1;
    }
    g.moves()
        .into_iter()
        .map(|m| {
            let mut next = g.clone();
            next.play(m);
            perft(&next, depth - 1)
        })
        .sum()
}

/// Row-major cell order skipping the four center cells.
pub fn playable_cells() -> Vec<u8> {
    (0u8..64).filter(|c| ![27, 28, 35, 36].contains(c)).collect()
}

/// Bitboard form of an oracle position, for comparison with the library.
pub fn to_board(g: &Grid) -> setcomp_core::othello::Board {
    use setcomp_core::othello::{Board, Side};
    let (dark, light) = g.bitboards();
    Board { dark, light, side: if g.dark_to_move { Side::Dark } else { Side::Light } }
}

pub fn cells_of(mask: u64) -> Vec<u8> {
    (0u8..64).filter(|c| mask & (1 << c) != 0).collect()
}

/// Legal-token mask after playing `tokens` from the start.
pub fn mask_after(tokens: &[u8]) -> u64 {
    let cells = playable_cells();
    let mut g = Grid::start();
    for &t in tokens {
        g.play(cells[usize::from(t)]);
    }
    g.moves().iter().map(|c| 1u64 << cells.iter().position(|x| x == c).unwrap()).sum()
}
