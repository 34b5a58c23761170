//! Multi-task problem generators and Multi-MNIST ingestion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, LossKind, Targets};
use crate::numerics::{dot, norm, Mat, Rng};

/// Name, loss and output size of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub name: String,
    pub loss: LossKind,
    pub output_dim: usize,
}

impl TaskInfo {
    pub fn classification(name: &str, classes: usize) -> Self {
        TaskInfo {
            name: name.to_string(),
            loss: LossKind::CrossEntropy,
            output_dim: classes,
        }
    }

    pub fn regression(name: &str, dim: usize) -> Self {
        TaskInfo {
            name: name.to_string(),
            loss: LossKind::MeanSquaredError,
            output_dim: dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
    pub tasks: Vec<TaskInfo>,
}

impl DatasetSplits {
    pub const HOLDOUT_DIVISOR: usize = 6;

    /// Splits rows in order: the first `n/6` go to test, the next `n/6` to
    /// validation, the rest to training.
    pub fn from_rows(all: Batch, tasks: Vec<TaskInfo>) -> Result<Self> {
        let n = all.len();
        let h = n / Self::HOLDOUT_DIVISOR;
        if n - 2 * h == 0 {
            return Err(Error::InvalidArgument(format!("{n} samples leave an empty training split")));
        }
        if all.targets.len() != tasks.len() {
            return Err(Error::Shape("task descriptors do not match targets".into()));
        }
        let idx = |r: std::ops::Range<usize>| r.collect::<Vec<_>>();
        Ok(DatasetSplits {
            test: all.select(&idx(0..h)),
            val: all.select(&idx(h..2 * h)),
            train: all.select(&idx(2 * h..n)),
            tasks,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.train.inputs.cols()
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Same data restricted to one task.
    pub fn single_task(&self, task: usize) -> DatasetSplits {
        DatasetSplits {
            train: self.train.single_task(task),
            val: self.val.single_task(task),
            test: self.test.single_task(task),
            tasks: vec![self.tasks[task].clone()],
        }
    }
}

/// `k` orthonormal vectors in `R^d` (Gram–Schmidt on Gaussian draws).
pub fn random_orthonormal(rng: &mut Rng, k: usize, d: usize) -> Result<Mat> {
    if k > d {
        return Err(Error::InvalidArgument(format!("{k} orthonormal vectors do not fit in {d} dimensions")));
    }
    let mut q = Mat::zeros(k, d);
    let mut i = 0;
    while i < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for j in 0..i {
                let c = dot(&v, q.row(j));
                v.iter_mut().zip(q.row(j)).for_each(|(a, b)| *a -= c * b);
            }
        }
        let n = norm(&v);
        if n < 1e-8 {
            continue;
        }
        q.row_mut(i).iter_mut().zip(&v).for_each(|(a, b)| *a = b / n);
        i += 1;
    }
    Ok(q)
}

fn gaussian_inputs(rng: &mut Rng, n: usize, d: usize) -> Mat {
    Mat::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).expect("sized")
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SymmetricSpec {
    pub input_dim: usize,
    pub classes: usize,
    /// Angle between the two tasks' score subspaces.
    pub angle: f64,
}

impl Default for SymmetricSpec {
    fn default() -> Self {
        SymmetricSpec {
            input_dim: 8,
            classes: 3,
            angle: std::f64::consts::FRAC_PI_4,
        }
    }
}

/// Two classification tasks whose labels are the argmax of scores along
/// orthonormal directions. Task 2 uses `cos(angle) W₁ + sin(angle) P` with
/// `P` orthogonal to `W₁`; with isotropic inputs the two tasks are
/// exchangeable.
pub fn symmetric_two_task(rng: &mut Rng, size: usize, spec: SymmetricSpec) -> Result<DatasetSplits> {
    let c = spec.classes;
    if c < 2 || 2 * c > spec.input_dim {
        return Err(Error::InvalidArgument(format!(
            "need 2 ≤ classes and 2·classes ≤ input_dim, got {c} and {}",
            spec.input_dim
        )));
    }
    let q = random_orthonormal(rng, 2 * c, spec.input_dim)?;
    let (cs, sn) = (spec.angle.cos(), spec.angle.sin());
    let mut w2 = Mat::zeros(c, spec.input_dim);
    for k in 0..c {
        for j in 0..spec.input_dim {
            w2[(k, j)] = cs * q[(k, j)] + sn * q[(c + k, j)];
        }
    }
    let x = gaussian_inputs(rng, size, spec.input_dim);
    let mut y1 = Vec::with_capacity(size);
    let mut y2 = Vec::with_capacity(size);
    for r in 0..size {
        let xr = x.row(r);
        y1.push(argmax(&(0..c).map(|k| dot(q.row(k), xr)).collect::<Vec<_>>()));
        y2.push(argmax(&w2.matvec(xr)));
    }
    DatasetSplits::from_rows(
        Batch {
            inputs: x,
            targets: vec![Targets::Classes(y1), Targets::Classes(y2)],
        },
        vec![TaskInfo::classification("t1", c), TaskInfo::classification("t2", c)],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixedNormSpec {
    pub input_dim: usize,
    pub classes: usize,
    /// Upper end of the pixel intensity range.
    pub intensity: f64,
}

impl Default for MixedNormSpec {
    fn default() -> Self {
        MixedNormSpec {
            input_dim: 16,
            classes: 4,
            intensity: 1.0,
        }
    }
}

/// Pixel-like inputs drawn around one prototype per class; task 1 classifies
/// the prototype (cross-entropy), task 2 reconstructs the input (MSE).
pub fn mixed_norm_two_task(rng: &mut Rng, size: usize, spec: MixedNormSpec) -> Result<DatasetSplits> {
    let (d, c) = (spec.input_dim, spec.classes);
    if c < 2 || d == 0 {
        return Err(Error::InvalidArgument("mixed-norm problem needs ≥ 2 classes and inputs".into()));
    }
    let protos: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..d).map(|_| if rng.uniform() < 0.4 { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut x = Mat::zeros(size, d);
    let mut labels = Vec::with_capacity(size);
    for r in 0..size {
        let k = rng.below(c);
        labels.push(k);
        for (j, p) in protos[k].iter().enumerate() {
            let flip = rng.uniform() < 0.25;
            let on = if flip { 1.0 - p } else { *p };
            x[(r, j)] = spec.intensity * (0.7 * on + 0.3 * rng.uniform());
        }
    }
    let recon = x.clone();
    DatasetSplits::from_rows(
        Batch {
            inputs: x,
            targets: vec![Targets::Classes(labels), Targets::Values(recon)],
        },
        vec![TaskInfo::classification("class", c), TaskInfo::regression("recon", d)],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConflictSpec {
    pub n_tasks: usize,
    /// Pairwise cosine between ground-truth task weight vectors.
    pub kappa: f64,
    pub noise: f64,
    pub input_dim: usize,
}

impl Default for ConflictSpec {
    fn default() -> Self {
        ConflictSpec {
            n_tasks: 4,
            kappa: 0.3,
            noise: 0.1,
            input_dim: 8,
        }
    }
}

impl ConflictSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_tasks;
        if n == 0 || self.input_dim < n {
            return Err(Error::InvalidArgument(format!(
                "conflict problem needs 1 ≤ n_tasks ≤ input_dim, got {n} and {}",
                self.input_dim
            )));
        }
        let lo = if n > 1 { -1.0 / (n as f64 - 1.0) } else { -1.0 };
        if !(self.kappa >= lo && self.kappa <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "pairwise cosine {} is infeasible for {n} unit vectors (needs [{lo}, 1])",
                self.kappa
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::InvalidArgument("noise level must be nonnegative".into()));
        }
        Ok(())
    }

    /// Unit task vectors with pairwise cosine `kappa`.
    pub fn task_vectors(&self, rng: &mut Rng) -> Result<Mat> {
        self.validate()?;
        let n = self.n_tasks;
        let mut c = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                c[(i, j)] = if i == j { 1.0 } else { self.kappa };
            }
        }
        let l = cholesky_psd(&c);
        let q = random_orthonormal(rng, n, self.input_dim)?;
        l.matmul(&q)
    }
}

/// Lower-triangular `L` with `L Lᵀ = C` for positive semidefinite `C`;
/// columns with a vanishing pivot are zeroed.
pub fn cholesky_psd(c: &Mat) -> Mat {
    let n = c.rows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let d = c[(j, j)] - (0..j).map(|k| l[(j, k)].powi(2)).sum::<f64>();
        if d <= 1e-12 {
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let s = c[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = s / ljj;
        }
    }
    l
}

/// Linear regression targets `y_i = w_i·x + σε` with task vectors of
/// pairwise cosine κ.
pub fn conflict_regression(spec: ConflictSpec, rng: &mut Rng, size: usize) -> Result<DatasetSplits> {
    let w = spec.task_vectors(rng)?;
    let x = gaussian_inputs(rng, size, spec.input_dim);
    let mut targets = Vec::with_capacity(spec.n_tasks);
    let clean = x.matmul(&w.transpose())?;
    for t in 0..spec.n_tasks {
        let y: Vec<f64> = (0..size).map(|r| clean[(r, t)] + spec.noise * rng.normal()).collect();
        targets.push(Targets::Values(Mat::from_vec(size, 1, y)?));
    }
    let tasks = (0..spec.n_tasks).map(|t| TaskInfo::regression(&format!("y{t}"), 1)).collect();
    DatasetSplits::from_rows(Batch { inputs: x, targets }, tasks)
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Unsigned-byte IDX array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8], expected_magic: u32) -> Result<IdxArray> {
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Idx(format!("truncated header at byte {at}")))
    };
    let magic = word(0)?;
    if magic != expected_magic {
        return Err(Error::Idx(format!(
            "bad magic number {magic:#010x}, expected {expected_magic:#010x}"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| word(4 + 4 * i).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let len: usize = dims.iter().product();
    let data = bytes
        .get(start..start + len)
        .ok_or_else(|| {
            Error::Idx(format!(
                "truncated payload: expected {len} bytes after the header, found {}",
                bytes.len().saturating_sub(start)
            ))
        })?
        .to_vec();
    Ok(IdxArray { dims, data })
}

pub fn encode_idx(magic: u32, dims: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    if (magic & 0xff) as usize != dims.len() {
        return Err(Error::Idx("magic number disagrees with the dimension count".into()));
    }
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::Idx("payload length disagrees with the dimensions".into()));
    }
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Idx(format!("dimension {d} exceeds 32 bits")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(data);
    Ok(out)
}

pub const DIGIT_SIDE: usize = 28;
pub const CANVAS_SIDE: usize = 36;
pub const RIGHT_OFFSET: usize = 8;

/// Places `left` at (0,0) and `right` at (8,8) on a 36×36 canvas, combining
/// overlapping pixels by maximum.
pub fn compose(left: &[f64], right: &[f64]) -> Vec<f64> {
    let mut canvas = vec![0.0f64; CANVAS_SIDE * CANVAS_SIDE];
    for (img, off) in [(left, 0), (right, RIGHT_OFFSET)] {
        for r in 0..DIGIT_SIDE {
            for c in 0..DIGIT_SIDE {
                let px = &mut canvas[(r + off) * CANVAS_SIDE + c + off];
                *px = (*px).max(img[r * DIGIT_SIDE + c]);
            }
        }
    }
    canvas
}

/// Bilinear resampling of a square image with pixel-centre alignment.
pub fn resize_bilinear(img: &[f64], from: usize, to: usize) -> Vec<f64> {
    let scale = from as f64 / to as f64;
    let src = |i: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(from - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; to * to];
    for r in 0..to {
        let (r0, r1, fr) = src(r);
        for c in 0..to {
            let (c0, c1, fc) = src(c);
            let p = |rr: usize, cc: usize| img[rr * from + cc];
            out[r * to + c] = (1.0 - fr) * ((1.0 - fc) * p(r0, c0) + fc * p(r0, c1))
                + fr * ((1.0 - fc) * p(r1, c0) + fc * p(r1, c1));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MnistTask {
    /// Class of the top-left digit.
    CL,
    /// Class of the bottom-right digit.
    CR,
    /// Reconstruction of the top-left digit.
    RL,
    /// Reconstruction of the bottom-right digit.
    RR,
}

/// Builds overlapped two-digit samples from MNIST IDX files, one sample per
/// source image (optionally capped by `limit`), each paired with a random
/// partner.
pub fn load_multimnist(
    images: &Path,
    labels: &Path,
    rng: &mut Rng,
    tasks: &[MnistTask],
    limit: Option<usize>,
) -> Result<DatasetSplits> {
    let img = parse_idx(&std::fs::read(images)?, IDX_IMAGES_MAGIC)?;
    let lab = parse_idx(&std::fs::read(labels)?, IDX_LABELS_MAGIC)?;
    multimnist_from_idx(&img, &lab, rng, tasks, limit)
}

pub fn multimnist_from_idx(
    img: &IdxArray,
    lab: &IdxArray,
    rng: &mut Rng,
    tasks: &[MnistTask],
    limit: Option<usize>,
) -> Result<DatasetSplits> {
    if img.dims.len() != 3 || img.dims[1] != DIGIT_SIDE || img.dims[2] != DIGIT_SIDE {
        return Err(Error::Idx(format!("expected N×28×28 images, got {:?}", img.dims)));
    }
    if lab.dims.len() != 1 || lab.dims[0] != img.dims[0] {
        return Err(Error::Idx(format!(
            "{} labels for {} images",
            lab.dims.first().copied().unwrap_or(0),
            img.dims[0]
        )));
    }
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no Multi-MNIST tasks requested".into()));
    }
    let px = DIGIT_SIDE * DIGIT_SIDE;
    let total = img.dims[0];
    let n = limit.map_or(total, |l| l.min(total));
    let digit = |i: usize| -> Vec<f64> {
        img.data[i * px..(i + 1) * px].iter().map(|&b| b as f64 / 255.0).collect()
    };
    let mut inputs = Mat::zeros(n, px);
    let mut cl = Vec::with_capacity(n);
    let mut cr = Vec::with_capacity(n);
    let mut rl = Mat::zeros(n, px);
    let mut rr = Mat::zeros(n, px);
    for s in 0..n {
        let j = rng.below(total);
        let (left, right) = (digit(s), digit(j));
        let small = resize_bilinear(&compose(&left, &right), CANVAS_SIDE, DIGIT_SIDE);
        inputs.row_mut(s).copy_from_slice(&small);
        rl.row_mut(s).copy_from_slice(&left);
        rr.row_mut(s).copy_from_slice(&right);
        cl.push(lab.data[s] as usize);
        cr.push(lab.data[j] as usize);
    }
    let mut targets = Vec::new();
    let mut infos = Vec::new();
    for t in tasks {
        let (target, info) = match t {
            MnistTask::CL => (Targets::Classes(cl.clone()), TaskInfo::classification("CL", 10)),
            MnistTask::CR => (Targets::Classes(cr.clone()), TaskInfo::classification("CR", 10)),
            MnistTask::RL => (Targets::Values(rl.clone()), TaskInfo::regression("RL", px)),
            MnistTask::RR => (Targets::Values(rr.clone()), TaskInfo::regression("RR", px)),
        };
        if let Targets::Classes(c) = &target {
            if let Some(bad) = c.iter().find(|&&k| k >= 10) {
                return Err(Error::Idx(format!("label {bad} is not a digit")));
            }
        }
        targets.push(target);
        infos.push(info);
    }
    DatasetSplits::from_rows(Batch { inputs, targets }, infos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_rows() {
        let mut rng = Rng::new(2);
        let q = random_orthonormal(&mut rng, 4, 6).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(q.row(i), q.row(j)) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn split_sizes() {
        let mut rng = Rng::new(1);
        let d = symmetric_two_task(&mut rng, 600, SymmetricSpec::default()).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (400, 100, 100));
    }

    #[test]
    fn symmetric_marginals_match() {
        let mut rng = Rng::new(3);
        let d = symmetric_two_task(&mut rng, 12_000, SymmetricSpec::default()).unwrap();
        let count = |t: &Targets| match t {
            Targets::Classes(c) => {
                let mut h = vec![0.0; 3];
                c.iter().for_each(|&k| h[k] += 1.0 / c.len() as f64);
                h
            }
            _ => unreachable!(),
        };
        let (a, b) = (count(&d.train.targets[0]), count(&d.train.targets[1]));
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 0.02, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn conflict_vectors_have_requested_cosine() {
        let mut rng = Rng::new(4);
        for kappa in [-0.3, 0.0, 0.3, 0.7, 1.0] {
            let spec = ConflictSpec {
                kappa,
                ..ConflictSpec::default()
            };
            let w = spec.task_vectors(&mut rng).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let want = if i == j { 1.0 } else { kappa };
                    assert!((dot(w.row(i), w.row(j)) - want).abs() < 1e-6);
                }
            }
        }
        let bad = ConflictSpec {
            kappa: -0.5,
            ..ConflictSpec::default()
        };
        assert!(conflict_regression(bad, &mut rng, 60).is_err());
    }

    #[test]
    fn unit_kappa_gives_identical_clean_targets() {
        let spec = ConflictSpec {
            kappa: 1.0,
            noise: 0.0,
            ..ConflictSpec::default()
        };
        let d = conflict_regression(spec, &mut Rng::new(5), 60).unwrap();
        let first = &d.train.targets[0];
        for t in &d.train.targets[1..] {
            match (first, t) {
                (Targets::Values(a), Targets::Values(b)) => {
                    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                        assert!((x - y).abs() < 1e-9);
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = mixed_norm_two_task(&mut Rng::new(7), 120, MixedNormSpec::default()).unwrap();
        let b = mixed_norm_two_task(&mut Rng::new(7), 120, MixedNormSpec::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn idx_header_is_big_endian() {
        let mut bytes = vec![0x00, 0x00, 0x08, 0x03, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 2];
        bytes.extend(0u8..12);
        let a = parse_idx(&bytes, IDX_IMAGES_MAGIC).unwrap();
        assert_eq!(a.dims, vec![2, 3, 2]);
        assert_eq!(a.data, (0u8..12).collect::<Vec<_>>());
        assert_eq!(encode_idx(IDX_IMAGES_MAGIC, &a.dims, &a.data).unwrap(), bytes);

        assert!(matches!(parse_idx(&bytes, IDX_LABELS_MAGIC), Err(Error::Idx(_))));
        assert!(matches!(parse_idx(&bytes[..20], IDX_IMAGES_MAGIC), Err(Error::Idx(_))));
        assert!(matches!(parse_idx(&bytes[..6], IDX_IMAGES_MAGIC), Err(Error::Idx(_))));
    }

    #[test]
    fn compose_with_blank_keeps_the_digit() {
        let digit: Vec<f64> = (0..DIGIT_SIDE * DIGIT_SIDE).map(|i| (i % 7) as f64 / 6.0).collect();
        let blank = vec![0.0; DIGIT_SIDE * DIGIT_SIDE];
        let canvas = compose(&digit, &blank);
        for r in 0..DIGIT_SIDE {
            for c in 0..DIGIT_SIDE {
                assert_eq!(canvas[r * CANVAS_SIDE + c], digit[r * DIGIT_SIDE + c]);
            }
        }
        let canvas = compose(&blank, &digit);
        assert_eq!(canvas[(RIGHT_OFFSET + 3) * CANVAS_SIDE + RIGHT_OFFSET + 5], digit[3 * DIGIT_SIDE + 5]);
        let small = resize_bilinear(&canvas, CANVAS_SIDE, DIGIT_SIDE);
        assert!(small.iter().all(|v| (0.0..=1.0).contains(v)));
        let flat = resize_bilinear(&vec![0.25; CANVAS_SIDE * CANVAS_SIDE], CANVAS_SIDE, DIGIT_SIDE);
        assert!(flat.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn multimnist_from_fixture() {
        let px = DIGIT_SIDE * DIGIT_SIDE;
        let data: Vec<u8> = (0..3 * px).map(|i| (i % 256) as u8).collect();
        let img = parse_idx(&encode_idx(IDX_IMAGES_MAGIC, &[3, 28, 28], &data).unwrap(), IDX_IMAGES_MAGIC).unwrap();
        let lab = IdxArray {
            dims: vec![3],
            data: vec![4, 1, 9],
        };
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        std::fs::write(&ip, encode_idx(IDX_IMAGES_MAGIC, &img.dims, &img.data).unwrap()).unwrap();
        std::fs::write(&lp, encode_idx(IDX_LABELS_MAGIC, &lab.dims, &lab.data).unwrap()).unwrap();
        let tasks = [MnistTask::CL, MnistTask::CR, MnistTask::RL, MnistTask::RR];
        let d = load_multimnist(&ip, &lp, &mut Rng::new(0), &tasks, None).unwrap();
        assert_eq!(d.train.len(), 3);
        assert_eq!(d.tasks.len(), 4);
        assert!(d.train.inputs.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        match &d.train.targets[0] {
            Targets::Classes(c) => assert_eq!(c, &vec![4, 1, 9]),
            _ => unreachable!(),
        }
        let short = IdxArray {
            dims: vec![2],
            data: vec![1, 2],
        };
        assert!(multimnist_from_idx(&img, &short, &mut Rng::new(0), &tasks, None).is_err());
    }
}
