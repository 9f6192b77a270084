use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use advit::attacks::{robust_eval, AttackConfig, EvalReport};
use advit::autograd::{BackwardFault, OpKind};
use advit::checkpoint::Checkpoint;
use advit::data::{generate_synthetic, save_dataset, Split, SyntheticSpec};
use advit::trainer::{train, EpochMetrics, StepRecord, TrainObserver};
use advit::verify::{verify_model, Tolerances, VerifyOptions, VerifyReport};
use advit::vit::{ViT, ViTConfig};
use advit::warmup::WarmupSchedule;
use serde_json::Value;

use crate::config::{seed_override, RunConfig};
use crate::failure::{classify, Failure, Kind};

pub const RESOLVED_CONFIG: &str = "config.json";
pub const METRICS: &str = "metrics.jsonl";
pub const STEPS: &str = "steps.jsonl";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const EVAL_REPORT: &str = "eval.json";


fn io_failure(kind: Kind, path: &Path, e: std::io::Error) -> Failure {
    Failure::new(kind, format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::new(Kind::Config, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_failure(Kind::Data, path, e))
}

struct RunWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
    steps: BufWriter<File>,
    best_acc: Option<f64>,
    quiet: bool,
}

impl RunWriter {
    fn line(w: &mut BufWriter<File>, value: &impl serde::Serialize) -> advit::Result<()> {
        serde_json::to_writer(&mut *w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

impl TrainObserver<f32> for RunWriter {
    fn on_step(&mut self, step: &StepRecord) -> advit::Result<()> {
        Self::line(&mut self.steps, step)
    }

    fn on_epoch(&mut self, m: &EpochMetrics, ckpt: &Checkpoint<f32>) -> advit::Result<()> {
        Self::line(&mut self.metrics, m)?;
        if self.best_acc.is_none_or(|best| m.train_robust_acc > best) {
            self.best_acc = Some(m.train_robust_acc);
            ckpt.save(self.dir.join(BEST_CKPT))?;
        }
        if !self.quiet {
            println!(
                "epoch {:>3}  loss {:.4}  robust acc {:.3}  lr {:.5}  |g| {:.3}  p {:.3}  {} ms",
                m.epoch, m.train_loss, m.train_robust_acc, m.lr, m.grad_norm_mean, m.p, m.wall_ms
            );
        }
        Ok(())
    }
}

pub fn cmd_train(config_path: &Path, quiet: bool) -> Result<(), Failure> {
    let cfg = RunConfig::read(config_path)?;
    let resolved = cfg.resolved()?;
    let train_set = cfg.data.train.load(Split::Train)?;
    let test_set = cfg.data.test.as_ref().map(|s| s.load(Split::Test)).transpose()?;
    let initial = match &cfg.init_checkpoint {
        Some(p) => Some(Checkpoint::<f32>::load_expecting(p, &cfg.model).map_err(classify)?.params),
        None => None,
    };

    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| io_failure(Kind::Data, dir, e))?;
    write_json(&dir.join(RESOLVED_CONFIG), &resolved)?;
    let open = |name: &str| {
        let path = dir.join(name);
        File::create(&path).map(BufWriter::new).map_err(|e| io_failure(Kind::Data, &path, e))
    };
    let mut writer = RunWriter { dir: dir.clone(), metrics: open(METRICS)?, steps: open(STEPS)?, best_acc: None, quiet };

    let outcome = train::<f32>(&cfg.train, &cfg.model, &train_set, initial.as_ref(), &mut writer).map_err(classify)?;
    let final_path = dir.join(FINAL_CKPT);
    outcome.checkpoint.save(&final_path).map_err(classify)?;
    if writer.best_acc.is_none() {
        outcome.checkpoint.save(dir.join(BEST_CKPT)).map_err(classify)?;
    }

    if let Some(test) = test_set {
        let attacks = resolved
            .eval_attacks
            .iter()
            .map(|a| a.resolve())
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .filter(|(name, _)| name != "none")
            .collect::<Vec<_>>();
        let model = ViT::new(cfg.model.clone(), outcome.checkpoint.params).map_err(classify)?;
        let report = robust_eval(&model, &test, &attacks, cfg.eval_seed).map_err(classify)?;
        write_json(&dir.join(EVAL_REPORT), &report)?;
        if !quiet {
            print_report(&report);
        }
    }
    if !quiet {
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!("clean        {:.4}  ({} examples)", r.clean_acc, r.examples);
    for a in &r.attacks {
        println!("{:<12} {:.4}", a.name, a.robust_acc);
    }
}

pub fn parse_attacks(spec: &str) -> Result<Vec<(String, AttackConfig)>, Failure> {
    let mut out = Vec::new();
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let cfg = AttackConfig::preset(name)
            .ok_or_else(|| Failure::new(Kind::Config, format!("unknown attack `{name}`; use pgdN, cwN or none")))?;
        // clean accuracy is always reported
        if name != "none" {
            out.push((name.to_string(), cfg));
        }
    }
    Ok(out)
}

pub fn cmd_eval(ckpt: &Path, dataset: &Path, attacks: &str, seed: Option<u64>, out: Option<&Path>) -> Result<(), Failure> {
    let attacks = parse_attacks(attacks)?;
    let seed = match seed {
        Some(s) => s,
        None => seed_override()?.unwrap_or(0),
    };
    let checkpoint = Checkpoint::<f32>::load(ckpt).map_err(classify)?;
    let data = crate::config::DataSource::Path(dataset.to_path_buf()).load(Split::Test)?;
    let model = ViT::new(checkpoint.config, checkpoint.params).map_err(classify)?;
    let report = robust_eval(&model, &data, &attacks, seed).map_err(classify)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::new(Kind::Config, e.to_string()))?;
    println!("{text}");
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(())
}

/// A run config (its `model` section) or a bare model config.
fn read_model_config(path: &Path) -> Result<ViTConfig, Failure> {
    let text =
        fs::read_to_string(path).map_err(|e| Failure::new(Kind::Config, format!("cannot read {}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| Failure::new(Kind::Config, format!("{}: {e}", path.display())))?;
    let model = if value.get("model").is_some() {
        serde_json::from_value::<RunConfig>(value).map(|c| c.model)
    } else {
        serde_json::from_value::<ViTConfig>(value)
    }
    .map_err(|e| Failure::new(Kind::Config, format!("{}: {e}", path.display())))?;
    model.validate().map_err(|e| Failure::new(Kind::Config, format!("model: {e}")))?;
    Ok(model)
}

pub fn parse_op_kind(name: &str) -> Option<OpKind> {
    Some(match name {
        "matmul" => OpKind::Matmul,
        "add" => OpKind::Add,
        "sub" => OpKind::Sub,
        "mul" => OpKind::Mul,
        "add-row" => OpKind::AddRow,
        "scale" => OpKind::Scale,
        "sum" => OpKind::Sum,
        "transpose" => OpKind::Transpose,
        "reshape" => OpKind::Reshape,
        "softmax" => OpKind::Softmax,
        "layer-norm" => OpKind::LayerNorm,
        "gelu" => OpKind::Gelu,
        "cross-entropy" => OpKind::CrossEntropy,
        "gather" => OpKind::Gather,
        "slice-cols" => OpKind::SliceCols,
        "concat-cols" => OpKind::ConcatCols,
        "concat-rows" => OpKind::ConcatRows,
        "grad-gate" => OpKind::GradGate,
        _ => return None,
    })
}

pub fn cmd_gradcheck(config: &Path, seed: Option<u64>, coords: usize, fault: Option<&str>) -> Result<(), Failure> {
    let model = read_model_config(config)?;
    let fault = fault
        .map(|name| {
            parse_op_kind(name)
                .map(|kind| BackwardFault { kind, scale: 1.5 })
                .ok_or_else(|| Failure::new(Kind::Config, format!("unknown op kind `{name}`")))
        })
        .transpose()?;
    let seed = match seed {
        Some(s) => s,
        None => seed_override()?.unwrap_or(0),
    };
    let opts = VerifyOptions { coords_per_tensor: coords, seed, fault, ..VerifyOptions::default() };
    let report = verify_model(&model, &opts).map_err(|e| {
        let mut f = classify(e);
        if matches!(f.kind, Kind::Data) {
            f.kind = Kind::Config;
        }
        f
    })?;
    print_verify(&report);
    let tol = Tolerances::default();
    if report.passed(&tol) {
        println!("gradcheck passed");
        Ok(())
    } else {
        let worst = report.worst();
        let mut reasons = Vec::new();
        if worst.max_rel_error >= tol.relative {
            reasons.push(format!("tensor `{}` has relative error {:.3e}", worst.name, worst.max_rel_error));
        }
        if report.max_abs_unresolved() >= tol.near_zero {
            reasons.push(format!("near-zero gradients differ by {:.3e}", report.max_abs_unresolved()));
        }
        if report.detached.max_abs_diff >= tol.detached {
            reasons.push(format!(
                "closed gate at block {} differs from the detached-branch oracle by {:.3e}",
                report.detached.block, report.detached.max_abs_diff
            ));
        }
        if !report.open_gates_bit_identical {
            reasons.push("open gates change the input gradient".into());
        }
        Err(Failure::new(Kind::Verification, format!("gradcheck failed: {}", reasons.join("; "))))
    }
}

fn print_verify(r: &VerifyReport) {
    println!("{} parameters", r.param_count);
    for t in &r.tensors {
        print!("{:<24} {:>10.3e}  ({} coords", t.name, t.max_rel_error, t.checked);
        if t.unresolved > 0 {
            print!(", {} near zero with abs error ≤ {:.1e}", t.unresolved, t.max_abs_unresolved);
        }
        println!(")");
    }
    let worst = r.worst();
    println!("max relative error {:.3e} at `{}`", worst.max_rel_error, worst.name);
    println!("detached-branch oracle, block {}: max abs diff {:.3e}", r.detached.block, r.detached.max_abs_diff);
    println!("open gates bit-identical to ungated: {}", r.open_gates_bit_identical);
}

pub fn cmd_gen_data(spec: &Path, out: &Path) -> Result<(), Failure> {
    let text =
        fs::read_to_string(spec).map_err(|e| Failure::new(Kind::Config, format!("cannot read {}: {e}", spec.display())))?;
    let spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| Failure::new(Kind::Config, format!("{}: {e}", spec.display())))?;
    let ds = generate_synthetic(&spec).map_err(|e| Failure::new(Kind::Config, e.to_string()))?;
    save_dataset(out, &ds).map_err(classify)?;
    println!("wrote {} examples to {}", ds.len(), out.display());
    Ok(())
}

pub fn cmd_schedule_dump(config: &Path, batches: Option<usize>) -> Result<(), Failure> {
    let cfg = RunConfig::read(config)?;
    let batches = match batches {
        Some(0) => return Err(Failure::new(Kind::Config, "batches per epoch must be positive")),
        Some(r) => r,
        None => cfg.train.batches_per_epoch(cfg.data.train.load(Split::Train)?.len()),
    };
    let schedule = WarmupSchedule::new(cfg.train.warmup.epochs, batches, cfg.train.warmup.mode).map_err(classify)?;
    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let mut emit = || -> std::io::Result<()> {
        writeln!(out, "epoch,batch,p,k")?;
        for t in 0..cfg.train.epochs {
            for a in 0..batches {
                let l = schedule.levels(t, a).expect("batch in range");
                writeln!(out, "{t},{a},{},{}", l.drop_prob, l.mask_fraction)?;
            }
        }
        out.flush()
    };
    emit().map_err(|e| Failure::new(Kind::Data, format!("stdout: {e}")))
}
