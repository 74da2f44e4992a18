//! Acceptance suite: one PASS/FAIL line per criterion at pinned tolerances.
//!
//! ```text
//! cargo test --release -p prunelab --test acceptance
//! ```

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::*;
use prunelab::cli::{cmd_pipeline, cmd_train_base, load_model, ExperimentConfig};
use prunelab::data::Tokenizer;
use prunelab::evalkit::{perplexity, sensitivity_sweep, SweepBase, SweepKind, SweepReport};
use prunelab::finetune::{adapter_trainable_count, FreezePolicy, DEFAULT_TARGETS};
use prunelab::metrics::{bi_scores, block_influence, ppl_scores, taylor_scores, Metric};
use prunelab::model::{MatrixRole, TransformerModel, TransformerSpec};
use prunelab::numeric::Tensor;
use prunelab::pruning::{FinetuneMethod, PipelineConfig, PruningObjective};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(got: f64, want: f64, rel: f64) -> bool {
    (got - want).abs() <= rel * want
}

fn llama() -> TransformerSpec {
    TransformerSpec::preset("llama-3.1-8b-like").unwrap()
}

fn c1_parameters() -> Outcome {
    let full = llama().count_params().unique as f64;
    let pruned = llama().count_params_pruned(8).unique as f64;
    outcome(
        within(full, 8.03e9, 0.01) && within(pruned, 6.29e9, 0.01),
        format!("{:.4}B dense, {:.4}B minus 8 blocks", full / 1e9, pruned / 1e9),
    )
}

fn c2_macs() -> Outcome {
    let macs = llama().with_layers(24).count_macs(64) as f64;
    outcome(within(macs, 368.65e9, 0.10), format!("{:.2}G at 64 tokens", macs / 1e9))
}

fn c3_adapters() -> Outcome {
    let c = adapter_merge_check(100, 3);
    outcome(
        c.init_diff == 0.0 && c.merge_diff < 1e-5,
        format!("init |Δ| {:.1e}, merged vs adapted |Δ| {:.2e} over 100 batches", c.init_diff, c.merge_diff),
    )
}

fn c4_taylor() -> Outcome {
    let model = TransformerModel::<f64>::new(micro_spec(), 1).unwrap();
    let calib = prunelab::data::CalibrationSet::new(
        vec![vec![0, 3, 1, 2, 2, 0], vec![1, 1, 3, 0, 2, 3], vec![2, 0, 1, 3]],
        6,
        "micro",
        0,
    )
    .unwrap();
    let got = taylor_scores(&model, &calib).unwrap().scores;
    let want = taylor_by_finite_differences(&model, &calib, 1e-5);
    let worst = got.iter().zip(&want).map(|(g, w)| rel_err(*g, *w)).fold(0.0, f64::max);
    outcome(
        model.num_params() <= 100 && worst < 1e-3,
        format!("{} params, worst relative error {worst:.2e}", model.num_params()),
    )
}

fn c5_block_influence() -> Outcome {
    let model = toy::<f64>(100, 2);
    let calib = wiki_calibration(8, 32, 4);
    let got = bi_scores(&model, &calib).unwrap().scores;
    let want = naive_block_influence(&model, &calib);
    let worst = got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    let t = |rows: &[f64]| Tensor::<f64>::from_f64([rows.len() / 2, 2], rows).unwrap();
    let x = t(&[1.0, 2.0, -3.0, 0.5]);
    let hand = [
        block_influence(&[vec![x.clone(), x.clone()]]).unwrap()[0],
        block_influence(&[vec![x.clone(), t(&[-1.0, -2.0, 3.0, -0.5])]]).unwrap()[0],
        block_influence(&[vec![t(&[1.0, 0.0]), t(&[0.5, 3f64.sqrt() / 2.0])]]).unwrap()[0],
    ];
    let exact = hand[0] == 0.0 && hand[1] == 2.0 && (hand[2] - 0.5).abs() < 1e-15;
    outcome(
        worst < 1e-6 && exact,
        format!("max |Δ| vs double loop {worst:.1e}; hand cases {hand:?}"),
    )
}

fn c6_perplexity() -> Outcome {
    let docs = prunelab::data::TokenizedCorpus {
        name: "cyc".into(),
        documents: (0..3).map(|d| (0..70).map(|i| ((i + d) % 17) as u32).collect()).collect(),
    };
    let uniform = perplexity(&Uniform { vocab: 17, max_seq: 32 }, &docs, None).unwrap();
    let oracle = perplexity(&Successor { vocab: 17 }, &docs, Some(16)).unwrap();
    let mut model = toy::<f64>(100, 5);
    for role in [MatrixRole::O, MatrixRole::Down] {
        model.layer_mut(3).matrix_mut(role).data_mut().fill(0.0);
    }
    let s = ppl_scores(&model, &wiki_calibration(4, 32, 2)).unwrap();
    let degradation = s.scores[3] - s.baseline.unwrap();
    outcome(
        (uniform - 17.0).abs() < 1e-6 && (oracle - 1.0).abs() < 1e-6 && degradation == 0.0,
        format!("uniform {uniform:.9} (V=17), oracle {oracle:.9}, identity-block degradation {degradation:e}"),
    )
}

fn c7_equivalence() -> Outcome {
    let tok = Tokenizer::printable_ascii();
    let model = toy::<f32>(tok.vocab_size(), 6);
    let eq = one_shot_vs_iterative(&model, &wiki(&tok), 2);
    let bad: Vec<&str> = eq
        .iter()
        .filter(|e| e.one_shot != e.iterative || !e.same_weights)
        .map(|e| e.metric.as_str())
        .collect();
    outcome(
        bad.is_empty() && eq.len() == 7,
        format!("{} metrics identical{}", eq.len() - bad.len(), if bad.is_empty() { String::new() } else { format!("; differ: {bad:?}") }),
    )
}

fn c8_freeze() -> Outcome {
    let c = freeze_check(3, 8);
    outcome(
        c.changed_frozen.is_empty() && c.gradient_keys_match && c.tied_rejected,
        format!(
            "frozen changed {:?}, gradient keys match {}, tied head rejected {}",
            c.changed_frozen, c.gradient_keys_match, c.tied_rejected
        ),
    )
}

fn c9_trainable() -> Outcome {
    let pruned = llama().with_layers(24);
    let lora = adapter_trainable_count(&pruned, &DEFAULT_TARGETS, 8) as f64;
    let partial = FreezePolicy::LmHeadPlusLast(3).trainable_count(&pruned) as f64;
    outcome(
        within(lora, 15.73e6, 0.01) && within(partial, 1179.68e6, 0.01),
        format!("adapters {:.2}M, lm-head+last-3 {:.2}M", lora / 1e6, partial / 1e6),
    )
}

/// Loads a shipped config with its output directory (and optionally its
/// base checkpoint) redirected.
fn shipped(name: &str, out: &Path, checkpoint: Option<&Path>) -> ExperimentConfig {
    let dir = config_dir();
    let mut table: toml::Table = std::fs::read_to_string(dir.join(name)).unwrap().parse().unwrap();
    table.insert("output_dir".into(), out.display().to_string().into());
    if let Some(c) = checkpoint {
        let model = table.entry("model").or_insert(toml::Table::new().into());
        model
            .as_table_mut()
            .unwrap()
            .insert("checkpoint".into(), c.display().to_string().into());
    }
    ExperimentConfig::parse(&toml::to_string(&table).unwrap(), &dir).unwrap()
}

struct Trained {
    checkpoint: PathBuf,
}

fn c10_toy_recipe(work: &Path, slot: &mut Option<Trained>) -> Outcome {
    let base_cfg = shipped("base.toml", &work.join("base"), None);
    let t = Instant::now();
    let trained = match cmd_train_base(&base_cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("base training failed: {e}")),
    };
    let train_time = t.elapsed();
    let (model, tok) = load_model(&base_cfg, Some(&trained.checkpoint)).unwrap();
    let fresh = TransformerModel::<f32>::new(model.spec().clone(), base_cfg.seed).unwrap();
    let wiki = wiki(&tok);
    let (ppl_fresh, ppl_trained) = (
        perplexity(&fresh, &wiki, Some(64)).unwrap(),
        perplexity(&model, &wiki, Some(64)).unwrap(),
    );
    *slot = Some(Trained {
        checkpoint: trained.checkpoint.clone(),
    });

    let mut lines = vec![format!(
        "base trained in {:.0}s, wiki ppl {ppl_fresh:.2} -> {ppl_trained:.2}",
        train_time.as_secs_f64()
    )];
    let mut pass = train_time < Duration::from_secs(20 * 60) && ppl_trained < ppl_fresh;
    let mut avg = Vec::new();
    for (name, label) in [("recipe_partial.toml", "partial"), ("recipe_lora.toml", "lora")] {
        let cfg = shipped(name, &work.join(label), Some(&trained.checkpoint));
        match cmd_pipeline(&cfg) {
            Ok(run) => {
                let r = &run.record.rounds;
                let improved = r.iter().all(|x| x.ppl_recovered.unwrap_or(f64::INFINITY) < x.ppl_pruned.unwrap_or(0.0));
                let shaped = run.report.perplexity.len() == 2 && run.report.tasks.len() == 2 && run.report.average_accuracy.is_some();
                pass &= improved && shaped && run.record.final_layers == 6;
                avg.push(run.report.average_accuracy.unwrap_or(f64::NAN));
                lines.push(format!(
                    "{label}: removed {:?}, calib ppl {:.3} -> {:.3}, avg acc {:.4}",
                    run.record.removed(),
                    r[0].ppl_pruned.unwrap_or(f64::NAN),
                    r[0].ppl_recovered.unwrap_or(f64::NAN),
                    run.report.average_accuracy.unwrap_or(f64::NAN)
                ));
            }
            Err(e) => {
                pass = false;
                lines.push(format!("{label}: failed: {e}"));
            }
        }
    }
    if let [p, l] = avg[..] {
        lines.push(format!(
            "recorded: partial {} lora on avg acc ({p:.4} vs {l:.4})",
            if p > l { ">" } else { "<=" }
        ));
    }
    outcome(pass, lines.join("\n          "))
}

fn c11_sweep(trained: &Option<Trained>) -> Outcome {
    let Some(trained) = trained else {
        return outcome(false, "no trained base model");
    };
    let cfg = shipped("recipe_partial.toml", Path::new("/unused"), Some(&trained.checkpoint));
    let (model, tok) = load_model(&cfg, Some(&trained.checkpoint)).unwrap();
    let suite = cfg.eval_suite(&tok).unwrap();
    let calib = wiki(&tok);
    let grid = vec![1, 5, 10, 30, 50];
    let mut lines = Vec::new();
    let mut pass = true;
    for metric in [Metric::Taylor, Metric::BlockInfluence] {
        let mut pc = PipelineConfig::new(PruningObjective::one_shot(metric, 2));
        pc.finetune = FinetuneMethod::None;
        let base = SweepBase {
            model: &model,
            tokenizer: &tok,
            pipeline: pc,
            calibration_corpus: &calib,
            calibration_count: 10,
            calibration_seq_len: 64,
            calibration_seed: cfg.seed,
            reuse_calibration: false,
            sft: Vec::new(),
            suite: &suite,
        };
        let kind = SweepKind::CalibrationCount(grid.clone());
        let run = || -> prunelab::Result<SweepReport> { sensitivity_sweep(&base, &kind) };
        match (run(), run()) {
            (Ok(a), Ok(b)) => {
                let complete = a.points.len() == grid.len()
                    && a.points.iter().all(|p| p.error.is_none() && p.removed.len() == 2 && !p.perplexity.is_empty());
                pass &= complete && a == b;
                let sets: Vec<String> = a.points.iter().map(|p| format!("{}:{:?}", p.value, p.removed)).collect();
                lines.push(format!("{}: {} (rerun equal: {})", metric.name(), sets.join(" "), a == b));
            }
            (Err(e), _) | (_, Err(e)) => {
                pass = false;
                lines.push(format!("{}: failed: {e}", metric.name()));
            }
        }
    }
    outcome(pass, lines.join("\n          "))
}

fn main() {
    let work = tempfile::tempdir().unwrap();
    let mut trained = None;
    let criteria: Vec<(u32, &str, Duration, Box<dyn FnOnce(&mut Option<Trained>) -> Outcome>)> = vec![
        (1, "parameter arithmetic", Duration::from_secs(1), Box::new(|_| c1_parameters())),
        (2, "MAC arithmetic", Duration::from_secs(1), Box::new(|_| c2_macs())),
        (3, "adapter zero-init and merge", Duration::from_secs(60), Box::new(|_| c3_adapters())),
        (4, "Taylor oracle", Duration::from_secs(60), Box::new(|_| c4_taylor())),
        (5, "block-influence oracle", Duration::from_secs(10), Box::new(|_| c5_block_influence())),
        (6, "perplexity invariants", Duration::from_secs(10), Box::new(|_| c6_perplexity())),
        (7, "one-shot = degenerate iterative", Duration::from_secs(60), Box::new(|_| c7_equivalence())),
        (8, "freeze soundness", Duration::from_secs(120), Box::new(|_| c8_freeze())),
        (9, "trainable-count formulas", Duration::from_secs(1), Box::new(|_| c9_trainable())),
        (
            10,
            "end-to-end toy recipe",
            Duration::from_secs(30 * 60),
            Box::new(|d| c10_toy_recipe(work.path(), d)),
        ),
        (11, "calibration-count sweep", Duration::from_secs(30 * 60), Box::new(|d| c11_sweep(d))),
    ];
    let mut failed = 0;
    for (n, name, budget, check) in criteria {
        let t = Instant::now();
        let o = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&mut trained)))
            .unwrap_or_else(|_| outcome(false, "panicked"));
        let took = t.elapsed();
        let pass = o.pass && took <= budget;
        failed += usize::from(!pass);
        println!(
            "{} {n:>2} {name} [{:.2}s / {}s budget]\n          {}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs(),
            o.detail
        );
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
