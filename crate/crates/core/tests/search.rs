use setcomp_core::exec::Exec;
use setcomp_core::search::{
    read_records_file, run_search, summarize, Budget, GroupKey, SamplerConfig, SearchConfig, RECORDS_FILE,
};

fn tiny_search(seed: u64) -> SearchConfig {
    SearchConfig {
        global_seed: seed,
        arch_count: 2,
        members_per_arch: 3,
        budget: Budget {
            max_steps: 60,
            val_interval: 20,
            patience: 1_000_000,
            batch_size: 16,
            val_size: 32,
            record_wall_clock: false,
        },
        // keep the vocabulary small so the test stays quick
        sampler: SamplerConfig { s_log2: [0.0, 2.0], v_gap_log2: [0.0, 2.0], ..Default::default() },
    }
}

#[test]
fn sweep_writes_one_record_per_member_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_search(17);
    let records = run_search(&config, dir.path(), Exec::Parallel).unwrap();
    assert_eq!(records.len(), 6);
    for (i, r) in records.iter().enumerate() {
        assert_eq!((r.arch_index, r.member_index), (i / 3, i % 3));
        assert_eq!(r.hypers, config.hypers(r.arch_index, r.member_index));
        assert_eq!(r.generalization_gap, r.hypers.arch.v - 1 - r.hypers.arch.s);
    }
    let again = tempfile::tempdir().unwrap();
    run_search(&config, again.path(), Exec::Sequential).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join(RECORDS_FILE)).unwrap(),
        std::fs::read(again.path().join(RECORDS_FILE)).unwrap()
    );
}

#[test]
fn resume_skips_finished_members() {
    let config = tiny_search(23);
    let full = tempfile::tempdir().unwrap();
    let expected = run_search(&config, full.path(), Exec::Sequential).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first_arch = SearchConfig { arch_count: 1, ..config.clone() };
    run_search(&first_arch, dir.path(), Exec::Sequential).unwrap();
    // a crash mid-write leaves a torn line after the architecture-0 records
    let path = dir.path().join(RECORDS_FILE);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.extend_from_slice(b"{\"arch_index\": 1, \"memb");
    std::fs::write(&path, bytes).unwrap();
    // widen the sweep; the manifest must be replaced to allow that
    std::fs::remove_file(dir.path().join("manifest.json")).unwrap();

    let resumed = run_search(&config, dir.path(), Exec::Sequential).unwrap();
    assert_eq!(resumed, expected);
    assert_eq!(read_records_file(&path).unwrap().len(), 6);
}

#[test]
fn mismatched_manifest_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = SearchConfig { arch_count: 1, members_per_arch: 1, ..tiny_search(1) };
    run_search(&config, dir.path(), Exec::Sequential).unwrap();
    let other = SearchConfig { global_seed: 2, ..config };
    assert!(run_search(&other, dir.path(), Exec::Sequential).is_err());
}

#[test]
fn diverged_members_are_recorded_and_left_out_of_summaries() {
    let mut config = tiny_search(5);
    config.sampler.peak_lr_log10 = [-300.0, 600.0];
    config.sampler.max_grad_norm_log10 = [290.0, 300.0];
    config.sampler.warmup_log10 = [-2.0, -1.0];
    let dir = tempfile::tempdir().unwrap();
    let records = run_search(&config, dir.path(), Exec::Parallel).unwrap();
    let diverged = records.iter().filter(|r| r.diverged).count();
    assert!(diverged > 0 && diverged < records.len(), "{diverged} of {}", records.len());
    for r in records.iter().filter(|r| r.diverged) {
        let d = r.divergence.as_ref().unwrap();
        assert!(r.steps < config.budget.max_steps);
        assert!(r.history.iter().all(|e| e.step <= d.step));
    }
    let summary = summarize(&records, &[GroupKey::Gap]).unwrap();
    let counted: usize = summary.rows.iter().filter(|r| r.metric.name() == "tvd").filter_map(|r| r.train.map(|q| q.count)).sum();
    assert_eq!(counted, records.len() - diverged);
    assert!(summary.notes.iter().any(|n| n.contains("diverged")));
}
