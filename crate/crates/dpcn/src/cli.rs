//! Command-line entry points: `train`, `eval`, `gradcheck`, `cam`, `report`.
//!
//! Arguments are `--key value` pairs; unreserved keys act as config
//! overrides on top of `--config <file>`. Exit codes: 0 success, 1 config,
//! 2 data, 3 numeric, 4 I/O.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::analysis::{divergence_report, grad_cam, heatmap_overlap, SourceTag};
use crate::checkpoint::{load_model, save_model};
use crate::config::{load_config, load_config_file, DatasetKind, RunConfig};
use crate::data::{load_cifar100, preprocess_pair, synth_shapes, Dataset, Split};
use crate::error::{Error, Result};
use crate::image_io::{write_pgm, write_ppm_overlay};
use crate::metrics::{parse_csv, write_csv, MetricsRecord};
use crate::model::{build_preset, DpcnModel};
use crate::oracle::{run_suite, SUITE_TOLERANCE};
use crate::tensor::Tensor;
use crate::train::{baseline, evaluate, BaselineKind, BaselineRun};

pub fn run(args: &[String]) -> i32 {
    match run_inner(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

const USAGE: &str = "usage: dpcn <train|eval|gradcheck|cam|report> [--key value ...]\n\
  train     --config FILE [overrides]         full 3-step run (+ baselines)\n\
  eval      --config FILE --checkpoint FILE   accuracy per classifier\n\
  gradcheck                                   run the gradient-oracle suite\n\
  cam       --config FILE --checkpoint FILE --index N [--class K]\n\
  report    --metrics FILE [--baselines-csv FILE]";

fn run_inner(args: &[String]) -> Result<()> {
    let Some(cmd) = args.first() else {
        return Err(Error::Config(format!("missing subcommand\n{USAGE}")));
    };
    let opts = parse_opts(&args[1..])?;
    match cmd.as_str() {
        "train" => cmd_train(opts),
        "eval" => cmd_eval(opts),
        "gradcheck" => cmd_gradcheck(opts),
        "cam" => cmd_cam(opts),
        "report" => cmd_report(opts),
        other => Err(Error::Config(format!("unknown subcommand '{other}'\n{USAGE}"))),
    }
}

struct Opts {
    map: BTreeMap<String, String>,
}

impl Opts {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn take_required(&mut self, key: &str) -> Result<String> {
        self.take(key).ok_or_else(|| Error::Config(format!("missing required --{key}")))
    }
}

fn parse_opts(args: &[String]) -> Result<Opts> {
    let mut map = BTreeMap::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key, got '{a}'")))?;
        let value = it
            .next()
            .ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
        map.insert(key.to_string(), value.clone());
    }
    Ok(Opts { map })
}

fn config_from_opts(opts: &mut Opts) -> Result<RunConfig> {
    let config_path = opts.take("config");
    let overrides: Vec<(String, String)> =
        std::mem::take(&mut opts.map).into_iter().collect();
    match config_path {
        Some(p) => load_config_file(Path::new(&p), &overrides),
        None => load_config(None, &overrides),
    }
}

/// Materialize (train, test) datasets for a run configuration.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (mut train_ds, mut test_ds) = match cfg.dataset {
        DatasetKind::SyntheticShapes => synth_shapes(
            cfg.classes,
            cfg.classes * cfg.images_per_class,
            cfg.image_size,
            cfg.noise_sigma,
            cfg.schedule.seed,
        )?,
        DatasetKind::Cifar100Binary => {
            let dir = cfg.resolve_data_dir()?;
            let subset = cfg.class_subset.as_deref();
            let train = load_cifar100(&dir.join("train.bin"), Split::Train, subset)?;
            let test = load_cifar100(&dir.join("test.bin"), Split::Test, subset)?;
            (train, test)
        }
    };
    if train_ds.classes != cfg.classes {
        return Err(Error::Config(format!(
            "dataset yields {} classes but config says {}",
            train_ds.classes, cfg.classes
        )));
    }
    preprocess_pair(&mut train_ds, &mut test_ds, cfg.preprocess);
    Ok((train_ds, test_ds))
}

fn build_model(cfg: &RunConfig) -> Result<DpcnModel> {
    build_preset(&cfg.model_config())
}

fn epoch_line(r: &MetricsRecord) -> String {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    format!(
        "epoch {:>3} [step {}] l1={} l2={} l_d={} l_extra={} sep={:.3} test_extra={}",
        r.epoch,
        r.step,
        f(r.l1),
        f(r.l2),
        f(r.l_d),
        f(r.l_extra),
        r.disc_sep_acc,
        f(r.test_acc[3]),
    )
}

fn cmd_train(mut opts: Opts) -> Result<()> {
    let cfg = config_from_opts(&mut opts)?;
    let (train_ds, test_ds) = load_datasets(&cfg)?;
    println!(
        "training {} on {} train / {} test images ({} classes, seed {})",
        cfg.preset.as_str(),
        train_ds.len(),
        test_ds.len(),
        cfg.classes,
        cfg.schedule.seed
    );
    for (step, epochs) in [
        (1, cfg.schedule.step1_epochs),
        (2, cfg.schedule.step2_epochs),
        (3, cfg.schedule.step3_epochs),
    ] {
        if epochs == 0 {
            println!("step {step} skipped (0 epochs)");
        }
    }

    let mut model = build_model(&cfg)?;
    let records = {
        let mut all = Vec::new();
        let sched = &cfg.schedule;
        let mut opt = crate::train::Sgd::new(sched.momentum, sched.weight_decay);
        for epoch in 0..sched.total_epochs() {
            let ctx = crate::train::EpochCtx {
                train: &train_ds,
                test: &test_ds,
                sched,
                augment: cfg.augment,
                epoch,
            };
            let r = match sched.step_of(epoch) {
                1 => crate::train::step1_epoch(&mut model, &mut opt, &ctx)?,
                2 => crate::train::step2_epoch(&mut model, &mut opt, &ctx)?,
                _ => crate::train::step3_epoch(&mut model, &mut opt, &ctx)?,
            };
            println!("{}", epoch_line(&r));
            all.push(r);
        }
        all
    };

    std::fs::create_dir_all(&cfg.out_dir)?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    write_csv(&metrics_path, &records)?;
    let ckpt_path = cfg.out_dir.join("model.dpcn");
    save_model(&model, &ckpt_path)?;
    println!("wrote {} and {}", metrics_path.display(), ckpt_path.display());

    let mut baseline_runs = Vec::new();
    for kind in &cfg.baselines {
        println!("training {} baseline...", kind.as_str());
        baseline_runs.push(baseline(*kind, &cfg.model_config(), &train_ds, &test_ds, &cfg.schedule, cfg.augment)?);
    }
    if !baseline_runs.is_empty() {
        write_baselines_csv(&cfg.out_dir.join("baselines.csv"), &baseline_runs)?;
    }

    if let Some(last) = records.last() {
        print_comparison_table(last, &baseline_runs);
    }
    let report = divergence_report(&model, &train_ds)?;
    let regime_sep =
        crate::train::training_regime_separation(&model, &train_ds, cfg.schedule.batch_size)?;
    println!(
        "divergence: separation accuracy {:.4} (training-regime threshold {:.4}), \
         score-histogram JSD {:.4} (max {:.4})",
        report.separation_accuracy,
        regime_sep,
        report.score_histogram_jsd,
        2.0f64.ln()
    );
    Ok(())
}

fn print_comparison_table(last: &MetricsRecord, baselines: &[BaselineRun]) {
    println!("\n{:<24} {:>10} {:>10}", "classifier", "train acc", "test acc");
    let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    for b in baselines {
        let name = match b.kind {
            BaselineKind::Single => "base network (single)",
            BaselineKind::Ensemble2 => "model ensemble (2)",
            BaselineKind::DoubleWidth => "doubled width",
        };
        println!("{:<24} {:>10.4} {:>10.4}", name, b.final_train_acc, b.final_test_acc);
    }
    for i in 0..3 {
        if last.train_acc[i].is_some() {
            println!(
                "{:<24} {:>10} {:>10}",
                format!("classifier of subnet{}", i + 1),
                f(last.train_acc[i]),
                f(last.test_acc[i])
            );
        }
    }
    println!("{:<24} {:>10} {:>10}", "extra classifier", f(last.train_acc[3]), f(last.test_acc[3]));
}

fn cmd_eval(mut opts: Opts) -> Result<()> {
    let ckpt = PathBuf::from(opts.take_required("checkpoint")?);
    let cfg = config_from_opts(&mut opts)?;
    let (train_ds, test_ds) = load_datasets(&cfg)?;
    let mut model = build_model(&cfg)?;
    load_model(&mut model, &ckpt)?;
    let tr = evaluate(&model, &train_ds)?;
    let te = evaluate(&model, &test_ds)?;
    for i in 0..model.subnets.len() {
        println!(
            "classifier of subnet{}: train {:.4} test {:.4}",
            i + 1,
            tr.subnet_acc[i],
            te.subnet_acc[i]
        );
    }
    println!("extra classifier: train {:.4} test {:.4}", tr.extra_acc, te.extra_acc);
    println!("discriminator separation accuracy (train): {:.4}", tr.sep_acc);
    Ok(())
}

fn cmd_gradcheck(_opts: Opts) -> Result<()> {
    let cases = run_suite()?;
    let mut worst: f64 = 0.0;
    let mut failed = 0;
    for c in &cases {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<44} max rel err {:.3e} ({} coords)",
            c.name, c.max_rel_err, c.coords_checked
        );
        worst = worst.max(c.max_rel_err);
        if !c.passed() {
            failed += 1;
        }
    }
    println!("max relative error over suite: {worst:.3e} (tolerance {SUITE_TOLERANCE:.0e})");
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn cmd_cam(mut opts: Opts) -> Result<()> {
    let ckpt = PathBuf::from(opts.take_required("checkpoint")?);
    let index: usize = opts
        .take_required("index")?
        .parse()
        .map_err(|_| Error::Config("--index must be an integer".into()))?;
    let class_opt: Option<usize> = match opts.take("class") {
        Some(v) => {
            Some(v.parse().map_err(|_| Error::Config("--class must be an integer".into()))?)
        }
        None => None,
    };
    let cfg = config_from_opts(&mut opts)?;
    let (_, test_ds) = load_datasets(&cfg)?;
    if index >= test_ds.len() {
        return Err(Error::Data(format!(
            "--index {index} out of range ({} test images)",
            test_ds.len()
        )));
    }
    let mut model = build_model(&cfg)?;
    load_model(&mut model, &ckpt)?;

    let image = Tensor::new(test_ds.image_shape().to_vec(), test_ds.images[index].clone())?;
    let class_idx = class_opt.unwrap_or(test_ds.labels[index]);
    std::fs::create_dir_all(&cfg.out_dir)?;

    let target_stage = model.subnets[0].stages.len() - 1;
    let mut maps = Vec::new();
    for (i, subnet) in model.subnets.iter().enumerate() {
        let cam = grad_cam(
            subnet,
            &model.store,
            &image,
            class_idx,
            target_stage,
            SourceTag::for_subnet(i),
        )?;
        let pgm = cfg.out_dir.join(format!("cam_subnet{}.pgm", i + 1));
        write_pgm(&pgm, cam.width, cam.height, &cam.values)?;
        let ppm = cfg.out_dir.join(format!("cam_subnet{}_overlay.ppm", i + 1));
        write_ppm_overlay(&ppm, &image, &cam.upsampled)?;
        println!(
            "subnet{}: heatmap {} ({}), wrote {} and {}",
            i + 1,
            if cam.is_all_zero() { "all-zero (flagged)" } else { "ok" },
            format_args!("class {class_idx}"),
            pgm.display(),
            ppm.display()
        );
        maps.push(cam);
    }
    let (overlap, both_zero) = heatmap_overlap(&maps[0], &maps[1])?;
    println!(
        "subnet1 vs subnet2 heatmap overlap: {overlap:.4}{}",
        if both_zero { " (both all-zero)" } else { "" }
    );
    Ok(())
}

fn cmd_report(mut opts: Opts) -> Result<()> {
    let metrics_path = PathBuf::from(opts.take_required("metrics")?);
    let baselines_path = opts.take("baselines-csv").map(PathBuf::from);
    let text = std::fs::read_to_string(&metrics_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", metrics_path.display())))?;
    let records = parse_csv(&text)?;
    if records.is_empty() {
        println!("no epochs recorded");
        return Ok(());
    }
    let baselines = match baselines_path {
        Some(p) => read_baselines_csv(&p)?,
        None => Vec::new(),
    };
    let last = records.last().expect("nonempty");
    println!(
        "{} epochs (step1 {}, step2 {}, step3 {})",
        records.len(),
        records.iter().filter(|r| r.step == 1).count(),
        records.iter().filter(|r| r.step == 2).count(),
        records.iter().filter(|r| r.step == 3).count(),
    );
    print_comparison_table(last, &baselines);
    let best = |pick: fn(&MetricsRecord) -> Option<f64>| {
        records.iter().filter_map(pick).fold(f64::NEG_INFINITY, f64::max)
    };
    println!(
        "\nbest test accuracy: subnet1 {:.4}, subnet2 {:.4}, extra {:.4}",
        best(|r| r.test_acc[0]),
        best(|r| r.test_acc[1]),
        best(|r| r.test_acc[3])
    );
    println!("final discriminator separation accuracy: {:.4}", last.disc_sep_acc);
    Ok(())
}

pub fn write_baselines_csv(path: &Path, runs: &[BaselineRun]) -> Result<()> {
    let mut out = String::from("kind,final_train_acc,final_test_acc\n");
    for r in runs {
        out.push_str(&format!(
            "{},{:.6},{:.6}\n",
            r.kind.as_str(),
            r.final_train_acc,
            r.final_test_acc
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_baselines_csv(path: &Path) -> Result<Vec<BaselineRun>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut runs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Data(format!("baselines csv line {}: want 3 fields", i + 1)));
        }
        runs.push(BaselineRun {
            kind: BaselineKind::parse(f[0])?,
            history: Vec::new(),
            final_train_acc: f[1]
                .parse()
                .map_err(|_| Error::Data(format!("bad float '{}'", f[1])))?,
            final_test_acc: f[2]
                .parse()
                .map_err(|_| Error::Data(format!("bad float '{}'", f[2])))?,
        });
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_config_error() {
        let code = run(&["frobnicate".to_string()]);
        assert_eq!(code, 1);
    }

    #[test]
    fn missing_value_rejected() {
        let opts = parse_opts(&["--config".to_string()]);
        assert!(opts.is_err());
        let opts = parse_opts(&["config".to_string(), "x".to_string()]);
        assert!(opts.is_err());
    }

    #[test]
    fn eval_without_checkpoint_is_config_error() {
        let code = run(&["eval".to_string()]);
        assert_eq!(code, 1);
    }
}
