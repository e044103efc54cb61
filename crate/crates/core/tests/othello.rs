mod common;

use common::oracle::{self, cells_of, mask_after, to_board, Grid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use setcomp_core::exec::Exec;
use setcomp_core::othello::{
    generate_games, perft, random_game, read_corpus, read_masks, write_corpus, write_masks, Board,
    CorpusSpec, Side, TOKEN_CELLS,
};

#[test]
fn token_map_matches_the_oracle_order() {
    assert_eq!(TOKEN_CELLS.to_vec(), oracle::playable_cells());
}

#[test]
fn perft_matches_the_oracle() {
    let expected = [4u64, 12, 56, 244, 1396, 8200];
    let b = Board::initial();
    let g = Grid::start();
    for (depth, &n) in (1..=6).zip(&expected) {
        assert_eq!(oracle::perft(&g, depth), n, "oracle depth {depth}");
        assert_eq!(perft(&b, depth), n, "bitboard depth {depth}");
    }
}

#[test]
fn move_generation_agrees_on_random_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut checked = 0;
    while checked < 100_000 {
        let mut g = Grid::start();
        let plies = rng.random_range(0..60);
        for _ in 0..plies {
            let moves = g.moves();
            if moves.is_empty() {
                break;
            }
            let b = to_board(&g);
            assert_eq!(cells_of(b.legal_cells()), moves);
            let mv = moves[rng.random_range(0..moves.len())];
            let before = b.disc_count();
            let next = b.play_cell(mv).unwrap();
            g.play(mv);
            assert_eq!(next, to_board(&g));
            assert_eq!(next.disc_count(), before + 1);
            checked += 1;
        }
    }
}

#[test]
fn silent_pass_is_confirmed_by_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut found = 0;
    for _ in 0..2000 {
        let mut b = Board::initial();
        let mut g = Grid::start();
        loop {
            let moves = cells_of(b.legal_cells());
            if moves.is_empty() {
                break;
            }
            let mv = moves[rng.random_range(0..moves.len())];
            let mover = b.side;
            let mut raw = g.clone();
            b = b.play_cell(mv).unwrap();
            g.play(mv);
            if b.side == mover && !b.is_terminal() {
                // Replay without the pass rule: the opponent is stuck, the mover is not.
                let dark_moved = mover == Side::Dark;
                raw.play(mv);
                let (dark, light) = raw.bitboards();
                let after = Grid { dark_to_move: !dark_moved, ..raw.clone() };
                assert!(after.moves().is_empty());
                assert!(!after.moves_for(dark_moved).is_empty());
                assert_eq!((dark, light), (b.dark, b.light));
                found += 1;
            }
        }
    }
    assert!(found > 0, "no pass occurred in 2000 random games");
}

#[test]
fn random_games_fill_most_of_the_board() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let total: usize = (0..n).map(|_| random_game(&mut rng, 60).tokens.len()).sum();
    let mean = total as f64 / n as f64;
    assert!((58.0..=60.0).contains(&mean), "mean game length {mean}");
}

#[test]
fn masks_agree_with_the_oracle() {
    let spec = CorpusSpec { count: 100, seed: 77, min_len: 15, max_len: 59, no_pass_games: false };
    let games = generate_games(&spec, Exec::Parallel).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for game in &games {
        let masks = game.prefix_masks().unwrap();
        let l = rng.random_range(1..=game.tokens.len());
        assert_eq!(masks[l - 1], mask_after(&game.tokens[..l]));
        for (i, m) in masks.iter().enumerate() {
            if i + 1 < game.tokens.len() {
                assert!(m.count_ones() >= 1);
            }
        }
    }
}

#[test]
fn corpus_files_are_reproducible() {
    let spec = CorpusSpec { count: 1000, seed: 3, min_len: 15, max_len: 59, no_pass_games: false };
    let write = || {
        let games = generate_games(&spec, Exec::Parallel).unwrap();
        let mut corpus = Vec::new();
        write_corpus(&games, &mut corpus).unwrap();
        let masks: Vec<Vec<u64>> = games.iter().map(|g| g.prefix_masks().unwrap()).collect();
        let mut m = Vec::new();
        write_masks(&masks, &mut m).unwrap();
        (corpus, m)
    };
    let (c1, m1) = write();
    let (c2, m2) = write();
    assert_eq!(c1, c2);
    assert_eq!(m1, m2);
    assert_eq!(read_corpus(c1.as_slice()).unwrap().len(), 1000);
    assert_eq!(read_masks(m1.as_slice()).unwrap().len(), 1000);
}

#[test]
fn no_pass_filter_drops_pass_games() {
    let spec = CorpusSpec { count: 300, seed: 8, min_len: 59, max_len: 59, no_pass_games: true };
    for g in generate_games(&spec, Exec::Sequential).unwrap() {
        assert!(!g.had_pass);
        let mut b = Board::initial();
        for &t in &g.tokens {
            let mover = b.side;
            b = b.play(t).unwrap();
            assert!(b.side != mover || b.is_terminal());
        }
    }
}
