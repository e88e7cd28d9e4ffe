//! Implementations of the CLI subcommands. Each command echoes its resolved
//! configuration into the output directory so a run can be reproduced from
//! the echo alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::cli::config::RunConfig;
use crate::cli::pipeline::{self, build_setup, defend_with, evaluate_model, run_full};
use crate::cli::{checkpoint, results, triggerfile};
use crate::error::{Error, Result};
use crate::hypergrad::{
    implicit_hypergrad_at, theorem1_error_curve, HvpMode, LinSolveConfig, QuadraticBilevel,
};
use crate::metrics::{accuracy, stability_stats};
use crate::model::{forward, train, MlpSpec, Params};
use crate::poison::{load_csv, poison_dataset, save_csv, Dataset};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::unlearn::{ibau, naive_unlearn, sweep_norm_bound, EvalSnapshot};

pub const TRAIN_CSV: &str = "train.csv";
pub const DEFENSE_CSV: &str = "defense.csv";
pub const TEST_CSV: &str = "test.csv";
pub const POISONED_CSV: &str = "train_poisoned.csv";
pub const TRIGGER_FILE: &str = "plan.trigger";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const SANITIZED_CKPT: &str = "model_sanitized.ckpt";

/// Shared command context: resolved config, output directory, overwrite flag.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub force: bool,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn guard_overwrite(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            return Err(Error::Config(format!(
                "{} exists; pass --force to overwrite",
                path.display()
            )));
        }
        Ok(())
    }

    fn echo_config(&self, command: &str) -> Result<()> {
        self.cfg
            .write_echo(&self.path(&format!("{command}_config.ini")))
    }
}

fn load_dataset(path: &Path, min_classes: usize) -> Result<Dataset> {
    load_csv(path, min_classes)
}

pub fn gen_data(ctx: &Ctx) -> Result<()> {
    let data = pipeline::generate_data(&ctx.cfg)?;
    for (name, ds) in [
        (TRAIN_CSV, &data.train),
        (DEFENSE_CSV, &data.defense),
        (TEST_CSV, &data.test),
    ] {
        let path = ctx.path(name);
        ctx.guard_overwrite(&path)?;
        save_csv(ds, &path)?;
        println!("wrote {} ({} rows)", path.display(), ds.len());
    }
    ctx.echo_config("gen-data")
}

pub fn poison_cmd(ctx: &Ctx, data: Option<&Path>) -> Result<()> {
    let data_path = data.map(Path::to_path_buf).unwrap_or(ctx.path(TRAIN_CSV));
    let classes = ctx.cfg.usize_of("data.classes")?;
    let clean = load_dataset(&data_path, classes)?;
    let plan = ctx.cfg.poison_plan(clean.dim(), clean.class_count)?;
    let (poisoned, index_sets) = poison_dataset(&clean, &plan)?;

    let out_csv = ctx.path(POISONED_CSV);
    ctx.guard_overwrite(&out_csv)?;
    save_csv(&poisoned, &out_csv)?;
    let trig_path = ctx.path(TRIGGER_FILE);
    ctx.guard_overwrite(&trig_path)?;
    triggerfile::save_plan(&plan, &trig_path)?;

    let total: usize = index_sets.iter().map(Vec::len).sum();
    println!(
        "wrote {} ({} rows, {} poisoned) and {}",
        out_csv.display(),
        poisoned.len(),
        total,
        trig_path.display()
    );
    ctx.echo_config("poison")
}

pub fn train_cmd(ctx: &Ctx, data: Option<&Path>) -> Result<()> {
    let data_path = data
        .map(Path::to_path_buf)
        .unwrap_or(ctx.path(POISONED_CSV));
    let classes = ctx.cfg.usize_of("data.classes")?;
    let dataset = load_dataset(&data_path, classes)?;
    let spec = ctx.cfg.mlp_spec(dataset.dim(), dataset.class_count)?;
    let train_cfg = ctx.cfg.train_config()?;
    let (params, history) = train(&dataset, &spec, &train_cfg);

    let ckpt = ctx.path(MODEL_CKPT);
    ctx.guard_overwrite(&ckpt)?;
    checkpoint::save_checkpoint(&params, &ckpt)?;

    let log_path = ctx.path("train_log.csv");
    let mut log = String::from("epoch,mean_loss\n");
    for (e, loss) in history.iter().enumerate() {
        let _ = writeln!(log, "{e},{loss}");
    }
    fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;

    let train_acc = accuracy(&spec, &params, &dataset);
    println!(
        "wrote {} (train acc {:.4}, final loss {:.6})",
        ckpt.display(),
        train_acc,
        history.last().copied().unwrap_or(f64::NAN)
    );
    ctx.echo_config("train")
}

pub fn unlearn_cmd(
    ctx: &Ctx,
    ckpt: Option<&Path>,
    data: Option<&Path>,
    trigger_file: Option<&Path>,
    test: Option<&Path>,
) -> Result<()> {
    let ckpt_path = ckpt.map(Path::to_path_buf).unwrap_or(ctx.path(MODEL_CKPT));
    let data_path = data.map(Path::to_path_buf).unwrap_or(ctx.path(DEFENSE_CSV));
    let params = checkpoint::load_checkpoint(&ckpt_path)?;
    let spec = MlpSpec::from_params(&params, ctx.cfg.activation()?);
    let classes = ctx.cfg.usize_of("data.classes")?;
    let clean = load_dataset(&data_path, classes)?;
    let unlearn_cfg = ctx.cfg.unlearn_config()?;
    let naive = ctx.cfg.use_naive_method()?;

    // The evaluation hook is optional attack-side instrumentation: it only
    // exists when trigger and test files are available.
    let trig_path = trigger_file
        .map(Path::to_path_buf)
        .unwrap_or(ctx.path(TRIGGER_FILE));
    let test_path = test.map(Path::to_path_buf).unwrap_or(ctx.path(TEST_CSV));
    let want_eval = ctx.cfg.bool_of("unlearn.eval_each_round")?;
    let eval_parts = if want_eval && trig_path.exists() && test_path.exists() {
        let plan = triggerfile::load_plan(&trig_path)?;
        let test_set = load_dataset(&test_path, classes)?;
        Some((plan, test_set))
    } else {
        None
    };

    let trigger_count = eval_parts
        .as_ref()
        .map(|(plan, _)| plan.entries.len())
        .unwrap_or(0);
    let mut hook_fn;
    let hook: Option<&mut dyn FnMut(&Params) -> EvalSnapshot> = match &eval_parts {
        Some((plan, test_set)) => {
            let spec_ref = &spec;
            hook_fn = move |p: &Params| {
                let acc = accuracy(spec_ref, p, test_set);
                let asr: Vec<f64> = (0..plan.entries.len())
                    .map(|i| {
                        pipeline::entry_asr(spec_ref, p, plan, i, test_set).unwrap_or(f64::NAN)
                    })
                    .collect();
                EvalSnapshot {
                    acc,
                    asr_per_trigger: asr,
                }
            };
            Some(&mut hook_fn)
        }
        None => None,
    };

    let (sanitized, records) = if naive {
        naive_unlearn(&spec, &params, &clean, &unlearn_cfg, hook)?
    } else {
        ibau(&spec, &params, &clean, &unlearn_cfg, hook)?
    };

    let out_ckpt = ctx.path(SANITIZED_CKPT);
    ctx.guard_overwrite(&out_ckpt)?;
    checkpoint::save_checkpoint(&sanitized, &out_ckpt)?;
    results::write_rounds_csv(&records, trigger_count, &ctx.path("results.csv"))?;

    let summary = match &eval_parts {
        Some((plan, test_set)) => Some(evaluate_model(
            &spec,
            &sanitized,
            plan,
            test_set,
            Some(&clean),
            ctx.cfg.f64_of("eval.gamma")?,
        )?),
        None => None,
    };
    results::write_results_txt(&records, summary.as_ref(), &ctx.path("results.txt"))?;

    println!(
        "wrote {} after {} {} rounds",
        out_ckpt.display(),
        records.len(),
        if naive { "naive" } else { "ibau" }
    );
    if let Some(report) = &summary {
        println!(
            "final acc {:.4}, asr {:.4}",
            report.acc, report.asr_overall
        );
    }
    ctx.echo_config("unlearn")
}

pub fn attack_eval(
    ctx: &Ctx,
    ckpt: Option<&Path>,
    trigger_file: Option<&Path>,
    test: Option<&Path>,
    train_csv: Option<&Path>,
) -> Result<()> {
    let ckpt_path = ckpt.map(Path::to_path_buf).unwrap_or(ctx.path(MODEL_CKPT));
    let trig_path = trigger_file
        .map(Path::to_path_buf)
        .unwrap_or(ctx.path(TRIGGER_FILE));
    let test_path = test.map(Path::to_path_buf).unwrap_or(ctx.path(TEST_CSV));

    let params = checkpoint::load_checkpoint(&ckpt_path)?;
    let spec = MlpSpec::from_params(&params, ctx.cfg.activation()?);
    let plan = triggerfile::load_plan(&trig_path)?;
    let classes = ctx.cfg.usize_of("data.classes")?;
    let test_set = load_dataset(&test_path, classes)?;
    let train_set = match train_csv {
        Some(p) => Some(load_dataset(p, classes)?),
        None => None,
    };

    let report = evaluate_model(
        &spec,
        &params,
        &plan,
        &test_set,
        train_set.as_ref(),
        ctx.cfg.f64_of("eval.gamma")?,
    )?;
    results::write_metrics_json(&report, &ctx.path("metrics.json"))?;
    results::write_metrics_csv(&report, &ctx.path("metrics.csv"))?;

    println!("acc {:.4}", report.acc);
    println!("asr_overall {:.4}", report.asr_overall);
    for (i, target, asr) in &report.asr_per_entry {
        println!("asr entry {i} (target {target}) {asr:.4}");
    }
    if let Some((gamma, risk)) = report.margin_risk {
        println!("margin_risk gamma={gamma} {risk:.4}");
    }
    if let Some(gap) = report.error_gap {
        println!("error_gap {gap:.4}");
    }
    ctx.echo_config("attack-eval")
}

/// Verify the hypergradient machinery against closed forms. Exit code 0 only
/// when every check lands inside its tolerance: 1e-4 end to end with
/// finite-difference products, 1e-8 with analytic ones.
pub fn oracle_check(ctx: &Ctx, analytic: bool) -> Result<()> {
    let mode = if analytic {
        HvpMode::Analytic
    } else {
        HvpMode::FiniteDiff
    };
    let threshold = if analytic { 1e-8 } else { 1e-4 };
    let mut rng = SeededRng::new(20_240_817);
    let mut worst: f64 = 0.0;

    // Linear-coupling oracle: hypergradient is theta at any delta.
    let d = 8;
    let prob = QuadraticBilevel::linear_coupling(d);
    let theta: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
    let point = prob.at(&theta);
    let cfg = LinSolveConfig {
        rounds: d,
        ..LinSolveConfig::default()
    };
    let theta_norm = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
    for _ in 0..10 {
        let delta = Tensor::randn(&[d], &mut rng, 0.0, 1.5);
        let got = implicit_hypergrad_at(&point, &delta, &cfg, mode)?;
        let err = got
            .hypergrad
            .iter()
            .zip(&theta)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / theta_norm;
        worst = worst.max(err);
    }
    println!("linear-coupling oracle: max rel err {worst:.3e}");

    // General SPD instances, full-rank CG, against the dense closed form.
    let mut general_worst: f64 = 0.0;
    for i in 0..10 {
        let dd = 4 + (i % 13); // spans up to d = 16
        let p = 3 + (i % 4);
        let prob = QuadraticBilevel::random(dd, p, 1.0, 4.0, &mut rng);
        let theta: Vec<f64> = (0..p).map(|_| rng.next_gaussian()).collect();
        let exact = prob.closed_form_hypergrad(&theta);
        let point = prob.at(&theta);
        let delta = Tensor::randn(&[dd], &mut rng, 0.0, 1.0);
        let cfg = LinSolveConfig {
            rounds: dd,
            tol: 0.0,
            ..LinSolveConfig::default()
        };
        let got = implicit_hypergrad_at(&point, &delta, &cfg, mode)?;
        let scale = exact.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let err = got
            .hypergrad
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / scale;
        general_worst = general_worst.max(err);
    }
    println!("general quadratic oracle: max rel err {general_worst:.3e}");
    worst = worst.max(general_worst);

    // Error-decay curve with the truncated default solver.
    let prob = QuadraticBilevel::random(8, 5, 1.0, 12.0, &mut rng);
    let theta: Vec<f64> = (0..5).map(|_| rng.next_gaussian()).collect();
    let curve = theorem1_error_curve(
        &prob,
        &theta,
        &[0, 1, 3, 5, 10, 50],
        &LinSolveConfig::default(),
        mode,
    )?;
    let mut csv = String::from("# hypergradient error vs inner iterations\nt,error\n");
    for (t, err) in &curve {
        let _ = writeln!(csv, "{t},{err}");
    }
    let curve_path = ctx.path("oracle_curve.csv");
    fs::write(&curve_path, csv).map_err(|e| Error::io(&curve_path, e))?;
    println!(
        "error curve written to {} (t=0: {:.3e}, t=50: {:.3e})",
        curve_path.display(),
        curve.first().map(|(_, e)| *e).unwrap_or(f64::NAN),
        curve.last().map(|(_, e)| *e).unwrap_or(f64::NAN)
    );

    ctx.echo_config("oracle-check")?;
    if worst <= threshold {
        println!("oracle-check PASS (max rel err {worst:.3e} <= {threshold:.0e})");
        Ok(())
    } else {
        Err(Error::numeric(
            "oracle-check",
            format!("max rel err {worst:.3e} exceeds {threshold:.0e}"),
        ))
    }
}

fn parse_values(values: Option<&str>, default: &str) -> Vec<String> {
    values
        .unwrap_or(default)
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn sweep(ctx: &Ctx, axis: &str, values: Option<&str>) -> Result<()> {
    match axis {
        "norm_bound" => sweep_norm_bound_axis(ctx, values),
        "poison_ratio" => sweep_poison_ratio(ctx, values),
        "clean_size" => sweep_clean_size(ctx, values),
        "seed" => sweep_seed(ctx, values),
        other => Err(Error::Config(format!(
            "sweep axis must be norm_bound|poison_ratio|clean_size|seed, got {other:?}"
        ))),
    }
}

fn write_table(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut out = format!("{header}\n");
    for row in rows {
        out.push_str(row);
        out.push('\n');
    }
    fs::write(path, &out).map_err(|e| Error::io(path, e))?;
    println!("{header}");
    for row in rows {
        println!("{row}");
    }
    Ok(())
}

fn sweep_norm_bound_axis(ctx: &Ctx, values: Option<&str>) -> Result<()> {
    let setup = build_setup(&ctx.cfg)?;
    let tau = setup.plan.entries[0].0.l2_norm();
    let default = format!("{},{},{}", 0.25 * tau, tau, 4.0 * tau);
    let bounds: Vec<f64> = parse_values(values, &default)
        .iter()
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("bad norm bound {s:?}")))
        })
        .collect::<Result<_>>()?;
    let unlearn_cfg = ctx.cfg.unlearn_config()?;

    let spec = setup.spec.clone();
    let plan = setup.plan.clone();
    let test = setup.data.test.clone();
    let mut eval = |params: &Params| {
        let acc = accuracy(&spec, params, &test);
        let asr: f64 = (0..plan.entries.len())
            .map(|i| pipeline::entry_asr(&spec, params, &plan, i, &test).unwrap_or(f64::NAN))
            .sum::<f64>()
            / plan.entries.len() as f64;
        (acc, asr)
    };
    let rows = sweep_norm_bound(
        &setup.spec,
        &setup.poisoned_params,
        &setup.data.defense,
        &bounds,
        &unlearn_cfg,
        &mut eval,
    )?;
    let formatted: Vec<String> = rows
        .iter()
        .map(|r| format!("{},{},{}", r.c_delta, r.acc, r.asr))
        .collect();
    write_table(
        &ctx.path("sweep_norm_bound.csv"),
        "c_delta,acc,asr",
        &formatted,
    )?;
    ctx.echo_config("sweep")
}

fn sweep_poison_ratio(ctx: &Ctx, values: Option<&str>) -> Result<()> {
    let mut ratios: Vec<f64> = parse_values(values, "0.05,0.1,0.2")
        .iter()
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("bad ratio {s:?}")))
        })
        .collect::<Result<_>>()?;
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut rows = Vec::new();
    for ratio in ratios {
        let mut cfg = ctx.cfg.clone();
        cfg.set("attack.ratio", &ratio.to_string())?;
        let run = run_full(&cfg)?;
        rows.push(format!(
            "{},{},{},{},{}",
            ratio, run.before.acc, run.before.asr_overall, run.after.acc, run.after.asr_overall
        ));
    }
    write_table(
        &ctx.path("sweep_poison_ratio.csv"),
        "ratio,acc_before,asr_before,acc_after,asr_after",
        &rows,
    )?;
    ctx.echo_config("sweep")
}

fn sweep_clean_size(ctx: &Ctx, values: Option<&str>) -> Result<()> {
    let setup = build_setup(&ctx.cfg)?;
    let unlearn_cfg = ctx.cfg.unlearn_config()?;
    let naive = ctx.cfg.use_naive_method()?;
    let gamma = ctx.cfg.f64_of("eval.gamma")?;
    let mut rows = Vec::new();
    for v in parse_values(values, "100,500,all") {
        let size = if v == "all" {
            setup.data.defense.len()
        } else {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad clean size {v:?}")))?
                .min(setup.data.defense.len())
        };
        let indices: Vec<usize> = (0..size).collect();
        let clean = setup.data.defense.subset(&indices);
        let (sanitized, _) = defend_with(&setup, &unlearn_cfg, &clean, naive, false)?;
        let report = evaluate_model(
            &setup.spec,
            &sanitized,
            &setup.plan,
            &setup.data.test,
            Some(&clean),
            gamma,
        )?;
        rows.push(format!("{},{},{}", size, report.acc, report.asr_overall));
    }
    write_table(
        &ctx.path("sweep_clean_size.csv"),
        "clean_size,acc,asr",
        &rows,
    )?;
    ctx.echo_config("sweep")
}

fn sweep_seed(ctx: &Ctx, values: Option<&str>) -> Result<()> {
    let seeds: Vec<u64> = parse_values(values, "0,1,2,3,4,5,6,7,8,9")
        .iter()
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("bad seed {s:?}")))
        })
        .collect::<Result<_>>()?;
    let mut accs = Vec::new();
    let mut asrs = Vec::new();
    let mut rows = Vec::new();
    for &seed in &seeds {
        let mut cfg = ctx.cfg.clone();
        cfg.apply_master_seed(seed);
        let run = run_full(&cfg)?;
        accs.push(run.after.acc);
        asrs.push(run.after.asr_overall);
        rows.push(format!(
            "{},{},{}",
            seed, run.after.acc, run.after.asr_overall
        ));
    }
    write_table(&ctx.path("sweep_seed.csv"), "seed,acc,asr", &rows)?;

    let acc_stats = stability_stats(&accs);
    let asr_stats = stability_stats(&asrs);
    let stat_rows = vec![
        format!(
            "acc,{},{},{},{}",
            acc_stats.mean, acc_stats.std, acc_stats.min, acc_stats.max
        ),
        format!(
            "asr,{},{},{},{}",
            asr_stats.mean, asr_stats.std, asr_stats.min, asr_stats.max
        ),
    ];
    write_table(
        &ctx.path("sweep_seed_stats.csv"),
        "metric,mean,std,min,max",
        &stat_rows,
    )?;
    ctx.echo_config("sweep")
}

/// Quick structural check used by tests: a checkpoint's logits are the same
/// function after a save/load cycle.
pub fn checkpoint_preserves_model(params: &Params, spec: &MlpSpec, x: &Tensor, path: &Path) -> bool {
    if checkpoint::save_checkpoint(params, path).is_err() {
        return false;
    }
    match checkpoint::load_checkpoint(path) {
        Ok(loaded) => forward(spec, &loaded, x) == forward(spec, params, x),
        Err(_) => false,
    }
}
