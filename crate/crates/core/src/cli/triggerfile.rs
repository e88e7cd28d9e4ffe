//! Text serialization of a resolved poison plan, so attack evaluation can
//! re-apply exactly the triggers that were injected.
//!
//! Human-inspectable key=value lines; float fields are printed with 17
//! significant digits so the round trip is exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::poison::{PoisonMode, PoisonPlan, TriggerKind, TriggerSpec};
use crate::tensor::Tensor;

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_vec(t: &Tensor) -> String {
    t.data()
        .iter()
        .map(|&v| fmt_f64(v))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn save_plan(plan: &PoisonPlan, path: &Path) -> Result<()> {
    let mut out = String::from("# ibau trigger plan v1\n");
    let mode = match plan.mode {
        PoisonMode::SingleTarget => "single_target",
        PoisonMode::AllToAll => "all_to_all",
        PoisonMode::MultiTrigger => "multi_trigger",
    };
    out.push_str(&format!("mode={mode}\n"));
    out.push_str(&format!("ratio={}\n", fmt_f64(plan.poison_ratio)));
    out.push_str(&format!("seed={}\n", plan.seed));
    out.push_str(&format!("entries={}\n", plan.entries.len()));
    for (i, (trigger, target)) in plan.entries.iter().enumerate() {
        let kind = match trigger.kind {
            TriggerKind::Patch => "patch",
            TriggerKind::Blend => "blend",
            TriggerKind::Noise => "noise",
        };
        out.push_str(&format!("entry.{i}.kind={kind}\n"));
        out.push_str(&format!("entry.{i}.target={target}\n"));
        out.push_str(&format!(
            "entry.{i}.blend_alpha={}\n",
            fmt_f64(trigger.blend_alpha)
        ));
        out.push_str(&format!("entry.{i}.mask={}\n", fmt_vec(&trigger.mask)));
        out.push_str(&format!(
            "entry.{i}.pattern={}\n",
            fmt_vec(&trigger.pattern)
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn parse_vec(path: &Path, line: usize, s: &str) -> Result<Tensor> {
    let vals: Result<Vec<f64>> = s
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::data(path, Some(line), format!("bad float {v:?}")))
        })
        .collect();
    let vals = vals?;
    Ok(Tensor::from_vec(&[vals.len()], vals))
}

pub fn load_plan(path: &Path) -> Result<PoisonPlan> {
    let text = fs::read_to_string(path)
        .map_err(|_| Error::Config(format!("cannot open trigger file {}", path.display())))?;
    let mut pairs: Vec<(usize, String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::data(path, Some(idx + 1), format!("expected key=value, got {raw:?}"))
        })?;
        pairs.push((idx + 1, k.trim().to_string(), v.trim().to_string()));
    }
    let lookup = |key: &str| -> Result<(usize, String)> {
        pairs
            .iter()
            .find(|(_, k, _)| k == key)
            .map(|(l, _, v)| (*l, v.clone()))
            .ok_or_else(|| Error::data(path, None, format!("missing key {key}")))
    };

    let (_, mode_s) = lookup("mode")?;
    let mode = match mode_s.as_str() {
        "single_target" => PoisonMode::SingleTarget,
        "all_to_all" => PoisonMode::AllToAll,
        "multi_trigger" => PoisonMode::MultiTrigger,
        other => return Err(Error::data(path, None, format!("bad mode {other:?}"))),
    };
    let (l, ratio_s) = lookup("ratio")?;
    let poison_ratio: f64 = ratio_s
        .parse()
        .map_err(|_| Error::data(path, Some(l), "bad ratio"))?;
    let (l, seed_s) = lookup("seed")?;
    let seed: u64 = seed_s
        .parse()
        .map_err(|_| Error::data(path, Some(l), "bad seed"))?;
    let (l, n_s) = lookup("entries")?;
    let n: usize = n_s
        .parse()
        .map_err(|_| Error::data(path, Some(l), "bad entry count"))?;

    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let (_, kind_s) = lookup(&format!("entry.{i}.kind"))?;
        let (l, target_s) = lookup(&format!("entry.{i}.target"))?;
        let target: usize = target_s
            .parse()
            .map_err(|_| Error::data(path, Some(l), "bad target"))?;
        let (l, alpha_s) = lookup(&format!("entry.{i}.blend_alpha"))?;
        let blend_alpha: f64 = alpha_s
            .parse()
            .map_err(|_| Error::data(path, Some(l), "bad blend_alpha"))?;
        let (l, mask_s) = lookup(&format!("entry.{i}.mask"))?;
        let mask = parse_vec(path, l, &mask_s)?;
        let (l, pattern_s) = lookup(&format!("entry.{i}.pattern"))?;
        let pattern = parse_vec(path, l, &pattern_s)?;
        if mask.len() != pattern.len() {
            return Err(Error::data(
                path,
                Some(l),
                format!("mask dim {} != pattern dim {}", mask.len(), pattern.len()),
            ));
        }
        let kind = match kind_s.as_str() {
            "patch" => TriggerKind::Patch,
            "blend" => TriggerKind::Blend,
            "noise" => TriggerKind::Noise,
            other => return Err(Error::data(path, None, format!("bad kind {other:?}"))),
        };
        entries.push((
            TriggerSpec {
                kind,
                mask,
                pattern,
                blend_alpha,
            },
            target,
        ));
    }
    Ok(PoisonPlan {
        mode,
        entries,
        poison_ratio,
        seed,
    })
}
