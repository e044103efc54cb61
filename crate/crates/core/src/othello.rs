//! Random Othello games as token sequences over the 60 playable cells,
//! with per-prefix legal-move masks for scoring external predictors.
//!
//! Cells are bit `row * 8 + col` with a1 = bit 0 and h8 = bit 63. A pass
//! emits no token: when the side to move has no legal move but the other
//! side does, the turn silently returns to the other side.

use std::io::{BufRead, Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{score_logits, Metrics};
use crate::rng::{fnv1a, stream};

pub const CELLS: usize = 64;
pub const TOKENS: usize = 60;
pub const CENTER: u64 = (1 << 27) | (1 << 28) | (1 << 35) | (1 << 36);

const NOT_A: u64 = 0xfefe_fefe_fefe_fefe;
const NOT_H: u64 = 0x7f7f_7f7f_7f7f_7f7f;

/// Cell of each token: row-major a1..h8 skipping d4, e4, d5, e5.
pub const TOKEN_CELLS: [u8; TOKENS] = {
    let mut out = [0u8; TOKENS];
    let mut cell = 0;
    let mut t = 0;
    while cell < CELLS {
        if CENTER & (1 << cell) == 0 {
            out[t] = cell as u8;
            t += 1;
        }
        cell += 1;
    }
    out
};

pub fn token_to_cell(token: u8) -> Result<u8> {
    TOKEN_CELLS.get(usize::from(token)).copied().ok_or_else(|| Error::IllegalMove(format!("token {token} out of range")))
}

pub fn cell_to_token(cell: u8) -> Option<u8> {
    TOKEN_CELLS.iter().position(|&c| c == cell).map(|t| t as u8)
}

/// Algebraic name such as `d3`.
pub fn cell_name(cell: u8) -> String {
    format!("{}{}", (b'a' + cell % 8) as char, cell / 8 + 1)
}

pub fn parse_cell(name: &str) -> Result<u8> {
    let b = name.as_bytes();
    if b.len() != 2 || !(b'a'..=b'h').contains(&b[0]) || !(b'1'..=b'8').contains(&b[1]) {
        return Err(Error::IllegalMove(format!("bad cell name {name:?}")));
    }
    Ok((b[1] - b'1') * 8 + (b[0] - b'a'))
}

/// Cell mask to token mask (bit `i` = token `i`).
pub fn cells_to_tokens(cells: u64) -> u64 {
    let mut out = 0;
    for (t, &c) in TOKEN_CELLS.iter().enumerate() {
        if cells & (1 << c) != 0 {
            out |= 1 << t;
        }
    }
    out
}

/// Hash of the token map, stored in file headers.
pub fn token_map_hash() -> u64 {
    fnv1a(&TOKEN_CELLS)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Dark,
    Light,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Dark => Side::Light,
            Side::Light => Side::Dark,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Board {
    pub dark: u64,
    pub light: u64,
    pub side: Side,
}

/// Shift by one step in direction `dir` (0..8), dropping wrapped bits.
#[inline]
fn shift(b: u64, dir: usize) -> u64 {
    match dir {
        0 => (b << 1) & NOT_A,
        1 => (b >> 1) & NOT_H,
        2 => b << 8,
        3 => b >> 8,
        4 => (b << 9) & NOT_A,
        5 => (b << 7) & NOT_H,
        6 => (b >> 7) & NOT_A,
        _ => (b >> 9) & NOT_H,
    }
}

/// Empty cells from which a run of `opp` discs ends in an `own` disc.
fn moves_for(own: u64, opp: u64) -> u64 {
    let empty = !(own | opp);
    let mut moves = 0;
    for dir in 0..8 {
        let mut x = shift(own, dir) & opp;
        for _ in 0..5 {
            x |= shift(x, dir) & opp;
        }
        moves |= shift(x, dir) & empty;
    }
    moves
}

fn flips_for(own: u64, opp: u64, mv: u64) -> u64 {
    let mut flips = 0;
    for dir in 0..8 {
        let mut run = 0;
        let mut y = shift(mv, dir);
        while y & opp != 0 {
            run |= y;
            y = shift(y, dir);
        }
        if y & own != 0 {
            flips |= run;
        }
    }
    flips
}

impl Board {
    pub fn initial() -> Board {
        Board { dark: (1 << 35) | (1 << 28), light: (1 << 27) | (1 << 36), side: Side::Dark }
    }

    pub fn own_opp(&self) -> (u64, u64) {
        match self.side {
            Side::Dark => (self.dark, self.light),
            Side::Light => (self.light, self.dark),
        }
    }

    pub fn disc_count(&self) -> u32 {
        (self.dark | self.light).count_ones()
    }

    pub fn is_valid(&self) -> bool {
        self.dark & self.light == 0 && (self.dark | self.light) & CENTER == CENTER
    }

    /// Legal cells for the side to move.
    pub fn legal_cells(&self) -> u64 {
        let (own, opp) = self.own_opp();
        moves_for(own, opp)
    }

    /// Legal moves as a token mask.
    pub fn legal_tokens(&self) -> u64 {
        cells_to_tokens(self.legal_cells())
    }

    pub fn is_terminal(&self) -> bool {
        let (own, opp) = self.own_opp();
        moves_for(own, opp) == 0 && moves_for(opp, own) == 0
    }

    /// Places a disc for the side to move, flips, and hands the turn over,
    /// passing back silently if the opponent cannot move.
    pub fn play_cell(&self, cell: u8) -> Result<Board> {
        let mv = 1u64.checked_shl(u32::from(cell)).unwrap_or(0);
        if mv == 0 || self.legal_cells() & mv == 0 {
            return Err(Error::IllegalMove(format!("{} is not legal here", if mv == 0 { cell.to_string() } else { cell_name(cell) })));
        }
        let (own, opp) = self.own_opp();
        let flips = flips_for(own, opp, mv);
        let own = own | mv | flips;
        let opp = opp & !flips;
        let (dark, light) = match self.side {
            Side::Dark => (own, opp),
            Side::Light => (opp, own),
        };
        let mut next = Board { dark, light, side: self.side.other() };
        if next.legal_cells() == 0 {
            let back = Board { side: self.side, ..next };
            if back.legal_cells() != 0 {
                next = back;
            }
        }
        Ok(next)
    }

    pub fn play(&self, token: u8) -> Result<Board> {
        self.play_cell(token_to_cell(token)?)
    }
}

pub fn initial_board() -> Board {
    Board::initial()
}

pub fn legal_moves(board: &Board) -> u64 {
    board.legal_tokens()
}

pub fn apply_move(board: &Board, token: u8) -> Result<Board> {
    board.play(token)
}

/// Token sequences of length `depth` reachable from `board`; a terminal
/// position reached early counts as one leaf.
pub fn perft(board: &Board, depth: u32) -> u64 {
    if depth == 0 || board.is_terminal() {
        return 1;
    }
    let mut moves = board.legal_cells();
    let mut total = 0;
    while moves != 0 {
        let cell = moves.trailing_zeros() as u8;
        moves &= moves - 1;
        let next = board.play_cell(cell).expect("generated move is legal");
        total += if depth == 1 { 1 } else { perft(&next, depth - 1) };
    }
    total
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameRecord {
    pub tokens: Vec<u8>,
    /// Some move in the game was followed by a silent pass.
    pub had_pass: bool,
}

impl GameRecord {
    /// Legal next-move token mask after each prefix `1..=len`.
    pub fn prefix_masks(&self) -> Result<Vec<u64>> {
        let mut b = Board::initial();
        let mut out = Vec::with_capacity(self.tokens.len());
        for &t in &self.tokens {
            b = b.play(t)?;
            out.push(b.legal_tokens());
        }
        Ok(out)
    }
}

fn nth_set_bit(mut mask: u64, n: u32) -> u8 {
    for _ in 0..n {
        mask &= mask - 1;
    }
    mask.trailing_zeros() as u8
}

/// Uniformly random legal moves until the game ends or `max_len` tokens.
pub fn random_game<R: Rng + ?Sized>(rng: &mut R, max_len: usize) -> GameRecord {
    let mut b = Board::initial();
    let mut tokens = Vec::with_capacity(max_len.min(TOKENS));
    let mut had_pass = false;
    while tokens.len() < max_len.min(TOKENS) {
        let moves = b.legal_cells();
        if moves == 0 {
            break;
        }
        let cell = nth_set_bit(moves, rng.random_range(0..moves.count_ones()));
        let mover = b.side;
        b = b.play_cell(cell).expect("generated move is legal");
        if b.side == mover && !b.is_terminal() {
            had_pass = true;
        }
        tokens.push(cell_to_token(cell).expect("center cells are never legal"));
    }
    GameRecord { tokens, had_pass }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub count: usize,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    /// Redraw any game in which a pass occurred.
    pub no_pass_games: bool,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.min_len == 0 || self.min_len > self.max_len || self.max_len > TOKENS {
            return Err(Error::Config(format!("invalid corpus spec {self:?}")));
        }
        Ok(())
    }
}

/// Game `index` of a corpus: target length `floor(U[min, max + 1))` and the
/// moves, both from the game's own stream.
pub fn corpus_game(spec: &CorpusSpec, index: u64) -> GameRecord {
    let mut rng = stream(spec.seed, "othello", &[index]);
    let len = rng.random_range(spec.min_len as f64..(spec.max_len + 1) as f64).floor() as usize;
    let len = len.clamp(spec.min_len, spec.max_len);
    loop {
        let g = random_game(&mut rng, len);
        if !(spec.no_pass_games && g.had_pass) {
            return g;
        }
    }
}

pub fn generate_games(spec: &CorpusSpec, exec: Exec) -> Result<Vec<GameRecord>> {
    spec.validate()?;
    Ok(exec.map_range(spec.count, |i| corpus_game(spec, i as u64)))
}

pub const CORPUS_MAGIC: &[u8; 8] = b"SCOTHGM1";
pub const MASKS_MAGIC: &[u8; 8] = b"SCOTHMK1";
pub const FORMAT_VERSION: u32 = 1;

fn write_header<W: Write>(w: &mut W, magic: &[u8; 8], count: usize) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(count as u64).to_le_bytes())?;
    w.write_all(&token_map_hash().to_le_bytes())?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<usize> {
    let mut buf = [0u8; 28];
    r.read_exact(&mut buf)?;
    if &buf[..8] != magic {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes"));
    let hash = u64::from_le_bytes(buf[20..28].try_into().expect("8 bytes"));
    if hash != token_map_hash() {
        return Err(Error::Format("token map hash mismatch".into()));
    }
    usize::try_from(count).map_err(|_| Error::Format("count overflow".into()))
}

/// Header, then per game a length byte and that many token bytes.
pub fn write_corpus<W: Write>(games: &[GameRecord], mut w: W) -> Result<()> {
    write_header(&mut w, CORPUS_MAGIC, games.len())?;
    for g in games {
        w.write_all(&[g.tokens.len() as u8])?;
        w.write_all(&g.tokens)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus<R: Read>(mut r: R) -> Result<Vec<Vec<u8>>> {
    let count = read_header(&mut r, CORPUS_MAGIC)?;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let mut len = [0u8; 1];
        r.read_exact(&mut len)?;
        let mut tokens = vec![0u8; usize::from(len[0])];
        r.read_exact(&mut tokens)?;
        if tokens.iter().any(|&t| usize::from(t) >= TOKENS) {
            return Err(Error::Format("token out of range".into()));
        }
        out.push(tokens);
    }
    Ok(out)
}

/// Header, then per game a length byte and one little-endian `u64` token
/// mask per prefix `1..=len`.
pub fn write_masks<W: Write>(masks: &[Vec<u64>], mut w: W) -> Result<()> {
    write_header(&mut w, MASKS_MAGIC, masks.len())?;
    for game in masks {
        w.write_all(&[game.len() as u8])?;
        for m in game {
            w.write_all(&m.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_masks<R: Read>(mut r: R) -> Result<Vec<Vec<u64>>> {
    let count = read_header(&mut r, MASKS_MAGIC)?;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let mut len = [0u8; 1];
        r.read_exact(&mut len)?;
        let mut game = Vec::with_capacity(usize::from(len[0]));
        for _ in 0..len[0] {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            game.push(u64::from_le_bytes(b));
        }
        out.push(game);
    }
    Ok(out)
}

pub fn mask_to_legal(mask: u64) -> Vec<bool> {
    (0..TOKENS).map(|t| mask & (1 << t) != 0).collect()
}

/// One line of an external prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub logits: Vec<f64>,
}

/// Scores prediction lines against masks. Lines pair one-to-one, in order,
/// with every stored prefix whose mask is non-empty.
pub fn evaluate_predictions<R: BufRead>(predictions: R, masks: &[Vec<u64>]) -> Result<(Metrics, usize)> {
    let mut targets = masks.iter().flatten().copied().filter(|&m| m != 0);
    let mut total = Metrics::default();
    let mut n = 0usize;
    for (i, line) in predictions.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("prediction line {}: {e}", i + 1)))?;
        if p.logits.len() != TOKENS {
            return Err(Error::Shape(format!("line {}: {} logits, expected {TOKENS}", i + 1, p.logits.len())));
        }
        let mask = targets.next().ok_or_else(|| Error::Format("more predictions than scored prefixes".into()))?;
        let m = score_logits(&p.logits, &mask_to_legal(mask))?;
        total = Metrics { tvd: total.tvd + m.tvd, itp: total.itp + m.itp, itr: total.itr + m.itr };
        n += 1;
    }
    let missing = targets.count();
    if missing > 0 {
        return Err(Error::Format(format!("{missing} scored prefixes have no prediction")));
    }
    if n == 0 {
        return Err(Error::Precondition("no predictions".into()));
    }
    let c = 1.0 / n as f64;
    Ok((Metrics { tvd: total.tvd * c, itp: total.itp * c, itr: total.itr * c }, n))
}
