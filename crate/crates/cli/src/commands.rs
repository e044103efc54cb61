use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use setcomp_core::exec::Exec;
use setcomp_core::metrics::{evaluate_logit_records, read_logit_records, Metrics};
use setcomp_core::model::write_checkpoint;
use setcomp_core::othello::{evaluate_predictions, generate_games, read_masks, write_corpus, write_masks};
use setcomp_core::search::{read_records_file, run_search_with, summarize, GroupKey, SUMMARY_FILE};
use setcomp_core::theory::{certify_hardcoded, PrecisionOptions, TheoryOptions, TheoryReport};
use setcomp_core::training::{final_parameter_sets, train_run_with};
use setcomp_core::Error;

use crate::manifest::{Invocation, Manifest};
use crate::CheckFailed;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn print_metrics(label: &str, m: &Metrics) {
    println!("{label}: tvd {:.6} itp {:.6} itr {:.6}", m.tvd, m.itp, m.itr);
}

pub fn run(inv: Invocation, exec: Exec) -> Result<()> {
    Manifest::new(inv.clone()).write()?;
    match inv {
        Invocation::VerifyTheory {
            v,
            precision,
            norm,
            max_v,
            enumeration_cap,
            allow_sampling,
            eq_tol,
            rank_tol,
            out,
        } => {
            if v > max_v {
                return Err(Error::Config(format!("v = {v} exceeds the exhaustive cap {max_v} (raise --max-v)")).into());
            }
            let opts = TheoryOptions {
                eq_tol,
                rank_tol,
                precision: PrecisionOptions { cap: enumeration_cap, allow_sampling, exec, ..Default::default() },
            };
            let report = certify_hardcoded(v, precision, norm, &opts)?;
            print_theory(&report);
            match &out {
                Some(path) => write_json(path, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
            if !report.passed {
                return Err(CheckFailed(format!("{} check(s) failed", report.failures.len())).into());
            }
            Ok(())
        }
        Invocation::Train { config, out, strict } => {
            std::fs::create_dir_all(&out)?;
            let mut stream = create(&out.join("metrics.jsonl"))?;
            let (outcome, trainer) = train_run_with(config.clone(), exec, |e| {
                serde_json::to_writer(&mut stream, e)?;
                stream.write_all(b"\n")?;
                stream.flush()?;
                eprintln!(
                    "step {:>9}  loss {}  val tvd {:.5} itp {:.5} itr {:.5}",
                    e.step,
                    e.loss.map_or("-".to_string(), |l| format!("{l:.5}")),
                    e.train.tvd,
                    e.train.itp,
                    e.train.itr
                );
                Ok(())
            })?;
            let (params, bema) = final_parameter_sets(&trainer);
            write_checkpoint(&params, Some(config.seed), create(&out.join("params.ckpt"))?)?;
            if let Some((_, p)) = &bema {
                write_checkpoint(p, Some(config.seed), create(&out.join("bema.ckpt"))?)?;
            }
            #[derive(Serialize)]
            struct RunSummary<'a> {
                steps: u64,
                stop: setcomp_core::training::StopReason,
                diverged: bool,
                divergence: &'a Option<setcomp_core::training::Divergence>,
                best: &'a Option<setcomp_core::training::BestMetrics>,
                bema_checkpoint: Option<setcomp_core::bema::BemaHypers>,
            }
            write_json(
                &out.join("outcome.json"),
                &RunSummary {
                    steps: outcome.steps,
                    stop: outcome.stop,
                    diverged: outcome.diverged.is_some(),
                    divergence: &outcome.diverged,
                    best: &outcome.best,
                    bema_checkpoint: bema.map(|(h, _)| h),
                },
            )?;
            if let Some(last) = outcome.history.last() {
                print_metrics("final validation (training parameters)", &last.train);
                print_metrics("final training-length (training parameters)", &last.train_length);
            }
            if let Some(d) = &outcome.diverged {
                eprintln!("diverged at step {}: {}", d.step, d.reason);
                if strict {
                    return Err(CheckFailed(format!("run diverged at step {}", d.step)).into());
                }
            }
            Ok(())
        }
        Invocation::Search { config, out, group } => {
            let records = run_search_with(&config, &out, exec, |a, recs| {
                let diverged = recs.iter().filter(|r| r.diverged).count();
                eprintln!("architecture {a}: {} runs finished, {diverged} diverged", recs.len());
            })?;
            write_summary(&records, &group, &out.join(SUMMARY_FILE))
        }
        Invocation::Summarize { input, group, out } => {
            let records = read_records_file(&input)?;
            write_summary(&records, &group, &out)
        }
        Invocation::OthelloGen { spec, out, masks } => {
            let games = generate_games(&spec, exec)?;
            write_corpus(&games, create(&out)?)?;
            if let Some(path) = &masks {
                let all = exec.map_slice(&games, |g| g.prefix_masks());
                let all = all.into_iter().collect::<setcomp_core::Result<Vec<_>>>()?;
                write_masks(&all, create(path)?)?;
            }
            let tokens: usize = games.iter().map(|g| g.tokens.len()).sum();
            let passes = games.iter().filter(|g| g.had_pass).count();
            eprintln!("{} games, {tokens} tokens, {passes} with a pass", games.len());
            Ok(())
        }
        Invocation::OthelloEval { logits, masks, out } => {
            let masks = read_masks(BufReader::new(File::open(&masks)?))?;
            let (m, n) = evaluate_predictions(BufReader::new(File::open(&logits)?), &masks)?;
            report_metrics(&m, n, out.as_deref())
        }
        Invocation::EvalLogits { logits, v, out } => {
            let records = read_logit_records(BufReader::new(File::open(&logits)?))?;
            let m = evaluate_logit_records(&records, v)?;
            report_metrics(&m, records.len(), out.as_deref())
        }
    }
}

fn report_metrics(m: &Metrics, n: usize, out: Option<&Path>) -> Result<()> {
    #[derive(Serialize)]
    struct Report<'a> {
        scored: usize,
        metrics: &'a Metrics,
    }
    let report = Report { scored: n, metrics: m };
    match out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string(&report)?),
    }
    Ok(())
}

fn write_summary(records: &[setcomp_core::search::RunRecord], group: &[GroupKey], out: &Path) -> Result<()> {
    let summary = summarize(records, group)?;
    for note in &summary.notes {
        eprintln!("note: {note}");
    }
    let mut w = create(out)?;
    summary.write_csv(group, &mut w)?;
    w.flush()?;
    eprintln!("{} records summarized into {}", records.len(), out.display());
    Ok(())
}

fn print_theory(r: &TheoryReport) {
    eprintln!("hardcoded model v={} C={} norm={:?}", r.v, r.precision, r.norm);
    eprintln!("{:>6} {:>16} {:>16} {:>12} {:>10}", "length", "min_displacement", "equality_dev", "sequences", "certified");
    for rec in &r.precision_table.records {
        eprintln!(
            "{:>6} {:>16.6} {:>16.3e} {:>12} {:>10}",
            rec.length,
            rec.min_displacement,
            rec.max_equality_deviation,
            rec.sequences_checked,
            rec.passes(r.precision, r.eq_tol)
        );
    }
    eprintln!(
        "rank(B+D) = {}, rank(D) = {} (v-1 = {})",
        r.bounds.rank_b_plus_d.rank,
        r.bounds.rank_d.rank,
        r.v - 1
    );
    eprintln!("balance condition holds: {}; decay violations: {}", r.balance.holds, r.decay.violations());
    for f in &r.failures {
        eprintln!("FAIL: {f}");
    }
    eprintln!("{}", if r.passed { "PASS" } else { "FAIL" });
}
