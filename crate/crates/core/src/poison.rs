//! Dataset construction and backdoor injection.
//!
//! Implements the additive attack family: patch triggers that overwrite
//! masked features, noise triggers that add a centered pattern under a mask,
//! and alpha-blend triggers. Label remapping covers single-target,
//! all-to-all (`y -> (y+1) mod C`), and multi-trigger-multi-target plans.
//! Poisoned rows are always clipped back into the valid [0, 1] feature range.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Labeled feature rows. Features live in [0, 1]^d, labels in [0, C).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, class_count: usize) -> Dataset {
        assert_eq!(x.nrows(), y.len(), "row count != label count");
        assert!(class_count >= 2, "need at least two classes");
        assert!(
            y.iter().all(|&l| l < class_count),
            "label out of range [0, {class_count})"
        );
        assert!(
            x.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
            "features must lie in [0, 1]"
        );
        Dataset { x, y, class_count }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Copy of the rows at `indices`, in the given order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.x.data()[i * d..(i + 1) * d]);
            labels.push(self.y[i]);
        }
        (Tensor::from_vec(&[indices.len(), d], data), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (x, y) = self.gather(indices);
        Dataset {
            x,
            y,
            class_count: self.class_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerKind {
    Patch,
    Blend,
    Noise,
}

/// A backdoor pattern and how to stamp it onto a feature row.
///
/// `mask` and `pattern` both have length d with entries in [0, 1]; patch
/// masks are binary. Noise patterns are stored in [0, 1] and applied centered
/// as `2 * pattern - 1`. `blend_alpha` is only meaningful for blend triggers.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSpec {
    pub kind: TriggerKind,
    pub mask: Tensor,
    pub pattern: Tensor,
    pub blend_alpha: f64,
}

impl TriggerSpec {
    pub fn patch(mask: Tensor, pattern: Tensor) -> TriggerSpec {
        assert!(
            mask.data().iter().all(|&m| m == 0.0 || m == 1.0),
            "patch mask must be binary"
        );
        TriggerSpec {
            kind: TriggerKind::Patch,
            mask,
            pattern,
            blend_alpha: 0.0,
        }
    }

    pub fn blend(pattern: Tensor, alpha: f64) -> TriggerSpec {
        assert!((0.0..=1.0).contains(&alpha), "blend alpha must be in [0,1]");
        let mask = Tensor::filled(pattern.shape(), 1.0);
        TriggerSpec {
            kind: TriggerKind::Blend,
            mask,
            pattern,
            blend_alpha: alpha,
        }
    }

    pub fn noise(mask: Tensor, pattern: Tensor) -> TriggerSpec {
        TriggerSpec {
            kind: TriggerKind::Noise,
            mask,
            pattern,
            blend_alpha: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    /// Nominal l2 size of the injected perturbation, measured against a zero
    /// input: the masked pattern for patch/noise, the scaled pattern for
    /// blend.
    pub fn l2_norm(&self) -> f64 {
        match self.kind {
            TriggerKind::Patch => self.mask.hadamard(&self.pattern).l2_norm(),
            TriggerKind::Noise => self
                .mask
                .hadamard(&self.pattern.map(|p| 2.0 * p - 1.0))
                .l2_norm(),
            TriggerKind::Blend => self.pattern.scale(self.blend_alpha).l2_norm(),
        }
    }
}

/// Stamp the trigger onto one feature row. Output stays in [0, 1]^d.
pub fn apply_trigger(row: &Tensor, trigger: &TriggerSpec) -> Tensor {
    assert_eq!(
        row.len(),
        trigger.dim(),
        "row length {} != trigger dim {}",
        row.len(),
        trigger.dim()
    );
    let out = match trigger.kind {
        TriggerKind::Patch => {
            // (1 - mask) * x + mask * pattern
            let keep = trigger.mask.map(|m| 1.0 - m).hadamard(row);
            keep.add(&trigger.mask.hadamard(&trigger.pattern))
        }
        TriggerKind::Noise => {
            let centered = trigger.pattern.map(|p| 2.0 * p - 1.0);
            row.add(&trigger.mask.hadamard(&centered))
        }
        TriggerKind::Blend => row
            .scale(1.0 - trigger.blend_alpha)
            .add(&trigger.pattern.scale(trigger.blend_alpha)),
    };
    out.clamp01()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoisonMode {
    SingleTarget,
    AllToAll,
    MultiTrigger,
}

/// The attacker's plan: which triggers, which targets, how much of the
/// training set to poison, and the sampling seed.
#[derive(Debug, Clone)]
pub struct PoisonPlan {
    pub mode: PoisonMode,
    /// One (trigger, target) entry for single-target and all-to-all (the
    /// target is ignored for all-to-all); several for multi-trigger.
    pub entries: Vec<(TriggerSpec, usize)>,
    pub poison_ratio: f64,
    pub seed: u64,
}

/// Inject backdoors according to `plan`.
///
/// Single-target and all-to-all rewrite `floor(ratio * n)` rows in place;
/// multi-trigger appends that many poisoned copies per entry onto the clean
/// rows. Returns the poisoned dataset and, per plan entry, the indices (into
/// the returned dataset) of the rows it poisoned.
pub fn poison_dataset(clean: &Dataset, plan: &PoisonPlan) -> Result<(Dataset, Vec<Vec<usize>>)> {
    if !(0.0..=1.0).contains(&plan.poison_ratio) {
        return Err(Error::Config(format!(
            "poison ratio must be in [0,1], got {}",
            plan.poison_ratio
        )));
    }
    let n = clean.len();
    let count = (plan.poison_ratio * n as f64).floor() as usize;
    if count < 1 {
        return Err(Error::Config(format!(
            "poison ratio {} on {} rows yields no poisoned samples",
            plan.poison_ratio, n
        )));
    }
    if plan.entries.is_empty() {
        return Err(Error::Config("poison plan has no entries".into()));
    }
    match plan.mode {
        PoisonMode::SingleTarget | PoisonMode::AllToAll => {
            if plan.entries.len() != 1 {
                return Err(Error::Config(format!(
                    "{:?} mode needs exactly one entry, got {}",
                    plan.mode,
                    plan.entries.len()
                )));
            }
        }
        PoisonMode::MultiTrigger => {
            let mut targets: Vec<usize> = plan.entries.iter().map(|(_, t)| *t).collect();
            targets.sort_unstable();
            targets.dedup();
            if targets.len() != plan.entries.len() {
                return Err(Error::Config(
                    "multi-trigger targets must be pairwise distinct".into(),
                ));
            }
        }
    }
    for (trigger, target) in &plan.entries {
        if trigger.dim() != clean.dim() {
            return Err(Error::Config(format!(
                "trigger dim {} != data dim {}",
                trigger.dim(),
                clean.dim()
            )));
        }
        if plan.mode != PoisonMode::AllToAll && *target >= clean.class_count {
            return Err(Error::Config(format!(
                "target label {} out of range [0, {})",
                target, clean.class_count
            )));
        }
    }

    let mut rng = SeededRng::new(plan.seed);
    let d = clean.dim();
    let mut x = clean.x.data().to_vec();
    let mut y = clean.y.clone();
    let mut index_sets = Vec::with_capacity(plan.entries.len());

    for (trigger, target) in &plan.entries {
        // Sampling pool: every row for all-to-all, non-target rows otherwise,
        // so poisoned rows actually change label.
        let mut pool: Vec<usize> = match plan.mode {
            PoisonMode::AllToAll => (0..n).collect(),
            _ => (0..n).filter(|&i| clean.y[i] != *target).collect(),
        };
        if pool.len() < count {
            return Err(Error::Config(format!(
                "cannot draw {count} poison rows for target {target}: only {} eligible",
                pool.len()
            )));
        }
        rng.shuffle(&mut pool);
        let chosen = &pool[..count];

        match plan.mode {
            PoisonMode::SingleTarget | PoisonMode::AllToAll => {
                let mut set = chosen.to_vec();
                set.sort_unstable();
                for &i in &set {
                    let row = Tensor::from_vec(&[d], x[i * d..(i + 1) * d].to_vec());
                    let stamped = apply_trigger(&row, trigger);
                    x[i * d..(i + 1) * d].copy_from_slice(stamped.data());
                    y[i] = match plan.mode {
                        PoisonMode::AllToAll => (clean.y[i] + 1) % clean.class_count,
                        _ => *target,
                    };
                }
                index_sets.push(set);
            }
            PoisonMode::MultiTrigger => {
                let mut set = Vec::with_capacity(count);
                let mut sorted = chosen.to_vec();
                sorted.sort_unstable();
                for &i in &sorted {
                    let row = clean.x.row(i);
                    let stamped = apply_trigger(&row, trigger);
                    set.push(y.len());
                    x.extend_from_slice(stamped.data());
                    y.push(*target);
                }
                index_sets.push(set);
            }
        }
    }

    let rows = y.len();
    let poisoned = Dataset::new(Tensor::from_vec(&[rows, d], x), y, clean.class_count);
    Ok((poisoned, index_sets))
}

/// Gaussian class clusters, globally min-max rescaled into [0, 1].
///
/// Class means sit on corners of a scaled hypercube: a random sign code per
/// class places each coordinate at 0.2 or 0.8, so classes differ in about
/// half of all coordinates and stay mutually near-equidistant. Spreading the
/// class signal across many coordinates keeps the clean task robust to small
/// universal shifts, which a single-coordinate arrangement is not.
pub fn make_synthetic_blobs(
    class_count: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    rng: &mut SeededRng,
) -> Dataset {
    assert!(class_count >= 2 && dim >= 1 && n_per_class >= 1);
    assert!(spread >= 0.0);
    assert!(
        dim >= 64 || class_count <= (1usize << dim),
        "cannot place {class_count} distinct class codes in {dim} dims"
    );

    // Distinct codes; redraw on collision (vanishingly rare for dim >= 8).
    let mut codes: Vec<Vec<bool>> = Vec::with_capacity(class_count);
    while codes.len() < class_count {
        let code: Vec<bool> = (0..dim).map(|_| rng.next_u64() & 1 == 1).collect();
        if !codes.contains(&code) {
            codes.push(code);
        }
    }

    let n = class_count * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, code) in codes.iter().enumerate() {
        for _ in 0..n_per_class {
            for &high in code {
                let mean = if high { 0.8 } else { 0.2 };
                data.push(mean + spread * rng.next_gaussian());
            }
            labels.push(c);
        }
    }
    // Rescale the theoretical support [0.2 - 3 spread, 0.8 + 3 spread] onto
    // [0, 1] and clip the rare tail stragglers, so the samples fill the unit
    // box the way saturating image data does. A shared affine map keeps
    // zero-spread class points identical.
    let lo = 0.2 - 3.0 * spread;
    let range = 0.6 + 6.0 * spread;
    for v in &mut data {
        *v = ((*v - lo) / range).clamp(0.0, 1.0);
    }
    Dataset::new(Tensor::from_vec(&[n, dim], data), labels, class_count)
}

/// Write `label,f0,...,f{d-1}` rows. Floats are printed with Rust's shortest
/// round-trip representation (at most 17 significant digits), so a
/// save/load cycle is bitwise exact.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let d = dataset.dim();
    let mut header = String::from("label");
    for j in 0..d {
        header.push_str(&format!(",f{j}"));
    }
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for i in 0..dataset.len() {
        let mut line = dataset.y[i].to_string();
        for j in 0..d {
            line.push(',');
            line.push_str(&format!("{}", dataset.x.get2(i, j)));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a dataset written by [`save_csv`]. The class count is inferred as
/// `max(label) + 1` unless a larger `min_classes` is given.
pub fn load_csv(path: &Path, min_classes: usize) -> Result<Dataset> {
    let file = File::open(path).map_err(|_| {
        Error::Config(format!("cannot open dataset file {}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::data(path, None, "empty file"))?;
    let header = header.map_err(|e| Error::io(path, e))?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.first() != Some(&"label") || cols.len() < 2 {
        return Err(Error::data(path, Some(1), "expected header label,f0,..."));
    }
    for (j, c) in cols[1..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(Error::data(
                path,
                Some(1),
                format!("expected column f{j}, found {c}"),
            ));
        }
    }
    let d = cols.len() - 1;

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::data(
                path,
                Some(lineno),
                format!("expected {} fields, found {}", d + 1, fields.len()),
            ));
        }
        let label: usize = fields[0].parse().map_err(|_| {
            Error::data(path, Some(lineno), format!("bad label {:?}", fields[0]))
        })?;
        labels.push(label);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| {
                Error::data(path, Some(lineno), format!("bad feature {f:?}"))
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::data(
                    path,
                    Some(lineno),
                    format!("feature {v} outside [0,1]"),
                ));
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::data(path, None, "no data rows"));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let classes = classes.max(min_classes).max(2);
    let n = labels.len();
    Ok(Dataset::new(
        Tensor::from_vec(&[n, d], data),
        labels,
        classes,
    ))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image/label file pair (the standard big-endian digit-database
/// layout). Pixels are scaled to [0, 1] by /255; `downsample_to` optionally
/// average-pools each image to a `k x k` grid.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    downsample_to: Option<usize>,
) -> Result<Dataset> {
    let mut img_bytes = Vec::new();
    File::open(images_path)
        .map_err(|_| Error::Config(format!("cannot open {}", images_path.display())))?
        .read_to_end(&mut img_bytes)
        .map_err(|e| Error::io(images_path, e))?;
    let mut lab_bytes = Vec::new();
    File::open(labels_path)
        .map_err(|_| Error::Config(format!("cannot open {}", labels_path.display())))?
        .read_to_end(&mut lab_bytes)
        .map_err(|e| Error::io(labels_path, e))?;

    let mut img = std::io::Cursor::new(&img_bytes);
    let truncated = |p: &Path| Error::data(p, None, "truncated file");
    let magic = img
        .read_u32::<BigEndian>()
        .map_err(|_| truncated(images_path))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::data(
            images_path,
            None,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = img.read_u32::<BigEndian>().map_err(|_| truncated(images_path))? as usize;
    let rows = img.read_u32::<BigEndian>().map_err(|_| truncated(images_path))? as usize;
    let cols = img.read_u32::<BigEndian>().map_err(|_| truncated(images_path))? as usize;
    let expected = 16 + n * rows * cols;
    if img_bytes.len() < expected {
        return Err(truncated(images_path));
    }

    let mut lab = std::io::Cursor::new(&lab_bytes);
    let magic = lab
        .read_u32::<BigEndian>()
        .map_err(|_| truncated(labels_path))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::data(
            labels_path,
            None,
            format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n_lab = lab.read_u32::<BigEndian>().map_err(|_| truncated(labels_path))? as usize;
    if n_lab != n {
        return Err(Error::data(
            labels_path,
            None,
            format!("label count {n_lab} != image count {n}"),
        ));
    }
    if lab_bytes.len() < 8 + n {
        return Err(truncated(labels_path));
    }

    let pixels = &img_bytes[16..16 + n * rows * cols];
    let labels: Vec<usize> = lab_bytes[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(2, |m| m + 1).max(2);

    let (out_r, out_c) = match downsample_to {
        Some(k) => {
            if k == 0 || k > rows || k > cols {
                return Err(Error::Config(format!(
                    "downsample size {k} invalid for {rows}x{cols} images"
                )));
            }
            (k, k)
        }
        None => (rows, cols),
    };
    let d = out_r * out_c;
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let im = &pixels[i * rows * cols..(i + 1) * rows * cols];
        if downsample_to.is_none() {
            data.extend(im.iter().map(|&p| p as f64 / 255.0));
            continue;
        }
        // Average-pool over near-equal blocks: boundary k for output index o
        // along a length-L axis is round(o * L / out).
        for or in 0..out_r {
            let (r0, r1) = (or * rows / out_r, (or + 1) * rows / out_r);
            for oc in 0..out_c {
                let (c0, c1) = (oc * cols / out_c, (oc + 1) * cols / out_c);
                let mut acc = 0.0;
                for r in r0..r1.max(r0 + 1) {
                    for c in c0..c1.max(c0 + 1) {
                        acc += im[r * cols + c] as f64;
                    }
                }
                let count = (r1.max(r0 + 1) - r0) * (c1.max(c0 + 1) - c0);
                data.push(acc / (255.0 * count as f64));
            }
        }
    }
    Ok(Dataset::new(
        Tensor::from_vec(&[n, d], data),
        labels,
        classes,
    ))
}

/// Seeded disjoint split. Fractions must sum to 1 within 1e-9; boundaries use
/// cumulative rounding so the pieces exactly cover the rows.
pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
        return Err(Error::Config(format!("bad split fractions {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SeededRng::new(seed);
    rng.shuffle(&mut order);

    let mut out = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    let mut start = 0usize;
    for (k, &f) in fractions.iter().enumerate() {
        cum += f;
        let end = if k + 1 == fractions.len() {
            n
        } else {
            (cum * n as f64).round() as usize
        };
        out.push(dataset.subset(&order[start..end]));
        start = end;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_vec(d: usize, hot: &[usize], value: f64) -> Tensor {
        let mut v = vec![0.0; d];
        for &h in hot {
            v[h] = value;
        }
        Tensor::from_vec(&[d], v)
    }

    fn sample_dataset(n: usize, d: usize, classes: usize, seed: u64) -> Dataset {
        let mut rng = SeededRng::new(seed);
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            for _ in 0..d {
                data.push(rng.next_f64());
            }
            labels.push(i % classes);
        }
        Dataset::new(Tensor::from_vec(&[n, d], data), labels, classes)
    }

    #[test]
    fn apply_trigger_patch_endpoints() {
        let d = 4;
        let x = Tensor::from_vec(&[d], vec![0.1, 0.2, 0.3, 0.4]);
        let zero_mask = TriggerSpec::patch(Tensor::zeros(&[d]), Tensor::filled(&[d], 0.9));
        assert_eq!(apply_trigger(&x, &zero_mask), x);

        let all_mask = TriggerSpec::patch(Tensor::filled(&[d], 1.0), Tensor::filled(&[d], 0.9));
        assert_eq!(apply_trigger(&x, &all_mask).data(), &[0.9; 4]);
    }

    #[test]
    fn apply_trigger_blend_endpoints() {
        let x = Tensor::from_vec(&[3], vec![0.1, 0.5, 0.9]);
        let pattern = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.5]);
        let a0 = TriggerSpec::blend(pattern.clone(), 0.0);
        assert_eq!(apply_trigger(&x, &a0), x);
        let a1 = TriggerSpec::blend(pattern.clone(), 1.0);
        assert_eq!(apply_trigger(&x, &a1), pattern);
    }

    #[test]
    fn apply_trigger_patch_idempotent() {
        let d = 5;
        let x = Tensor::from_vec(&[d], vec![0.1, 0.9, 0.3, 0.7, 0.5]);
        let trig = TriggerSpec::patch(unit_vec(d, &[1, 3], 1.0), Tensor::filled(&[d], 0.8));
        let once = apply_trigger(&x, &trig);
        assert_eq!(apply_trigger(&once, &trig), once);
    }

    #[test]
    fn poison_single_target_counts_and_labels() {
        let ds = sample_dataset(100, 6, 4, 1);
        let trig = TriggerSpec::patch(unit_vec(6, &[5], 1.0), Tensor::filled(&[6], 0.95));
        let plan = PoisonPlan {
            mode: PoisonMode::SingleTarget,
            entries: vec![(trig, 2)],
            poison_ratio: 0.2,
            seed: 3,
        };
        let (poisoned, sets) = poison_dataset(&ds, &plan).unwrap();
        assert_eq!(poisoned.len(), 100);
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].len(), 20);
        for &i in &sets[0] {
            assert_eq!(poisoned.y[i], 2);
            assert_ne!(ds.y[i], 2, "sampled from non-target rows");
        }
        // Rows outside the set are untouched.
        for i in 0..100 {
            if !sets[0].contains(&i) {
                assert_eq!(poisoned.x.row(i), ds.x.row(i));
                assert_eq!(poisoned.y[i], ds.y[i]);
            }
        }
    }

    #[test]
    fn poison_smallest_count_changes_one_row() {
        let ds = sample_dataset(50, 4, 2, 5);
        let trig = TriggerSpec::patch(unit_vec(4, &[0], 1.0), Tensor::filled(&[4], 1.0));
        let plan = PoisonPlan {
            mode: PoisonMode::SingleTarget,
            entries: vec![(trig, 1)],
            poison_ratio: 0.02, // floor(0.02 * 50) = 1
            seed: 9,
        };
        let (poisoned, sets) = poison_dataset(&ds, &plan).unwrap();
        assert_eq!(sets[0].len(), 1);
        let changed: Vec<usize> = (0..50)
            .filter(|&i| poisoned.x.row(i) != ds.x.row(i) || poisoned.y[i] != ds.y[i])
            .collect();
        assert_eq!(changed, sets[0]);
    }

    #[test]
    fn poison_all_to_all_rotates_labels() {
        let ds = sample_dataset(40, 4, 4, 7);
        let trig = TriggerSpec::patch(unit_vec(4, &[3], 1.0), Tensor::filled(&[4], 0.9));
        let plan = PoisonPlan {
            mode: PoisonMode::AllToAll,
            entries: vec![(trig, 0)],
            poison_ratio: 0.5,
            seed: 2,
        };
        let (poisoned, sets) = poison_dataset(&ds, &plan).unwrap();
        assert_eq!(sets[0].len(), 20);
        for &i in &sets[0] {
            assert_eq!(poisoned.y[i], (ds.y[i] + 1) % 4);
        }
    }

    #[test]
    fn poison_multi_appends_and_respects_range() {
        let ds = sample_dataset(60, 5, 4, 11);
        let t0 = TriggerSpec::patch(unit_vec(5, &[0], 1.0), Tensor::filled(&[5], 0.9));
        let t1 = TriggerSpec::patch(unit_vec(5, &[1], 1.0), Tensor::filled(&[5], 0.8));
        let plan = PoisonPlan {
            mode: PoisonMode::MultiTrigger,
            entries: vec![(t0, 0), (t1, 1)],
            poison_ratio: 0.1,
            seed: 4,
        };
        let (poisoned, sets) = poison_dataset(&ds, &plan).unwrap();
        assert_eq!(poisoned.len(), 60 + 2 * 6);
        assert_eq!(sets[0], (60..66).collect::<Vec<_>>());
        assert_eq!(sets[1], (66..72).collect::<Vec<_>>());
        assert!(poisoned
            .x
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
        // Original rows intact.
        for i in 0..60 {
            assert_eq!(poisoned.x.row(i), ds.x.row(i));
            assert_eq!(poisoned.y[i], ds.y[i]);
        }
    }

    #[test]
    fn poison_rejects_bad_ratio_and_duplicate_targets() {
        let ds = sample_dataset(10, 3, 3, 1);
        let trig = TriggerSpec::patch(unit_vec(3, &[0], 1.0), Tensor::filled(&[3], 0.9));
        let plan = PoisonPlan {
            mode: PoisonMode::SingleTarget,
            entries: vec![(trig.clone(), 0)],
            poison_ratio: 1.5,
            seed: 0,
        };
        assert!(poison_dataset(&ds, &plan).is_err());

        let plan = PoisonPlan {
            mode: PoisonMode::MultiTrigger,
            entries: vec![(trig.clone(), 1), (trig, 1)],
            poison_ratio: 0.2,
            seed: 0,
        };
        assert!(poison_dataset(&ds, &plan).is_err());
    }

    #[test]
    fn blobs_balanced_and_identical_at_zero_spread() {
        let mut rng = SeededRng::new(6);
        let ds = make_synthetic_blobs(3, 8, 10, 0.0, &mut rng);
        assert_eq!(ds.len(), 30);
        for c in 0..3 {
            let rows: Vec<usize> = (0..30).filter(|&i| ds.y[i] == c).collect();
            assert_eq!(rows.len(), 10);
            let first = ds.x.row(rows[0]);
            for &r in &rows[1..] {
                assert_eq!(ds.x.row(r), first);
            }
        }
    }

    #[test]
    fn csv_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let mut rng = SeededRng::new(13);
        let ds = make_synthetic_blobs(3, 5, 7, 0.1, &mut rng);
        save_csv(&ds, &path).unwrap();
        let loaded = load_csv(&path, ds.class_count).unwrap();
        assert_eq!(loaded, ds);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "label,f0,f1").unwrap();
        writeln!(f, "0,0.5,0.5").unwrap();
        writeln!(f, "1,1.5,0.5").unwrap();
        drop(f);
        let err = load_csv(&path, 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":3"), "error should name line 3: {msg}");
        assert!(msg.contains("1.5"));
    }

    #[test]
    fn csv_empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        File::create(&path).unwrap();
        assert!(load_csv(&path, 2).is_err());
    }

    fn write_idx_pair(
        dir: &Path,
        images: &[Vec<u8>],
        rows: u32,
        cols: u32,
        labels: &[u8],
        magic_img: u32,
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let img_path = dir.join("imgs.idx");
        let lab_path = dir.join("labs.idx");
        let mut f = File::create(&img_path).unwrap();
        f.write_all(&magic_img.to_be_bytes()).unwrap();
        f.write_all(&(images.len() as u32).to_be_bytes()).unwrap();
        f.write_all(&rows.to_be_bytes()).unwrap();
        f.write_all(&cols.to_be_bytes()).unwrap();
        for im in images {
            f.write_all(im).unwrap();
        }
        let mut f = File::create(&lab_path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (img_path, lab_path)
    }

    #[test]
    fn idx_accepts_standard_magic_and_downsamples() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = write_idx_pair(
            dir.path(),
            &[vec![0, 255, 255, 0]],
            2,
            2,
            &[3],
            IDX_IMAGES_MAGIC,
        );
        let ds = load_idx(&img, &lab, Some(1)).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.dim(), 1);
        assert!((ds.x.data()[0] - 0.5).abs() < 1e-12);
        assert_eq!(ds.y, vec![3]);
    }

    #[test]
    fn idx_rejects_bad_magic_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = write_idx_pair(
            dir.path(),
            &[vec![0, 0, 0, 0]],
            2,
            2,
            &[1],
            0x0000_0804,
        );
        assert!(load_idx(&img, &lab, None).is_err());

        let (img, lab) = write_idx_pair(
            dir.path(),
            &[vec![0, 0, 0, 0]],
            2,
            2,
            &[1, 2],
            IDX_IMAGES_MAGIC,
        );
        assert!(load_idx(&img, &lab, None).is_err());
    }

    #[test]
    fn split_sizes_and_disjoint_cover() {
        let ds = sample_dataset(10, 3, 2, 20);
        let parts = split(&ds, &[0.5, 0.5], 1).unwrap();
        assert_eq!(parts[0].len(), 5);
        assert_eq!(parts[1].len(), 5);

        let identity = split(&ds, &[1.0], 1).unwrap();
        assert_eq!(identity[0].len(), 10);

        assert!(split(&ds, &[0.6, 0.6], 1).is_err());
    }

    proptest! {
        #[test]
        fn split_union_is_original_multiset(seed in 0u64..500, n in 5usize..40) {
            let ds = sample_dataset(n, 3, 2, seed);
            let parts = split(&ds, &[0.3, 0.45, 0.25], seed).unwrap();
            let mut rows: Vec<(Vec<u64>, usize)> = Vec::new();
            for p in &parts {
                for i in 0..p.len() {
                    let bits: Vec<u64> = p.x.row(i).data().iter().map(|v| v.to_bits()).collect();
                    rows.push((bits, p.y[i]));
                }
            }
            let mut orig: Vec<(Vec<u64>, usize)> = (0..n)
                .map(|i| {
                    let bits: Vec<u64> = ds.x.row(i).data().iter().map(|v| v.to_bits()).collect();
                    (bits, ds.y[i])
                })
                .collect();
            rows.sort();
            orig.sort();
            prop_assert_eq!(rows, orig);
        }

        #[test]
        fn poisoned_rows_stay_in_unit_box(seed in 0u64..200) {
            let ds = sample_dataset(30, 4, 3, seed);
            let trig = TriggerSpec::noise(
                Tensor::filled(&[4], 1.0),
                Tensor::from_vec(&[4], vec![0.9, 0.1, 0.5, 1.0]),
            );
            let plan = PoisonPlan {
                mode: PoisonMode::SingleTarget,
                entries: vec![(trig, 1)],
                poison_ratio: 0.3,
                seed,
            };
            let (poisoned, _) = poison_dataset(&ds, &plan).unwrap();
            prop_assert!(poisoned.x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
