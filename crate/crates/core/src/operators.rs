//! Linear forward models, measurement synthesis, toy dataset generators, and
//! the measurement-set container layout.
//!
//! Every shipped operator is linear and applied through graph ops, so
//! fidelity gradients and DPS guidance can differentiate through it. Masked
//! coordinates are zeroed rather than dropped, and measurement noise is
//! projected onto the observation support: a masked entry of y is exactly
//! zero, which is what lets blind conditioning recover the mask from y alone
//! without being handed it.
//!
//! Training containers carry (y, operator) pairs and nothing else; ground
//! truth exists only in evaluation containers, and the training loader
//! refuses any container that has one.

use std::path::Path;
use std::sync::Arc;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::flow::ConditionMode;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone)]
enum OpBody {
    Identity,
    /// Binary [1,d] row, 1 = observed.
    Mask(Tensor),
    /// Output = input · matrix; covers circular blur and mean-pool
    /// downsampling.
    Dense(Tensor),
    Composite(Vec<ForwardOperator>),
}

#[derive(Clone)]
pub struct ForwardOperator {
    desc: String,
    in_dim: usize,
    out_dim: usize,
    body: OpBody,
}

impl ForwardOperator {
    pub fn identity(d: usize) -> ForwardOperator {
        ForwardOperator {
            desc: "id".into(),
            in_dim: d,
            out_dim: d,
            body: OpBody::Identity,
        }
    }

    /// Mask from an explicit observation row (1 = observed, 0 = hidden).
    pub fn from_mask_row(mask: Tensor) -> ForwardOperator {
        assert_eq!(mask.rows(), 1);
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let d = mask.cols();
        ForwardOperator {
            desc: "mask".into(),
            in_dim: d,
            out_dim: d,
            body: OpBody::Mask(mask),
        }
    }

    /// Hide a fraction p of the d coordinates, rounded to the nearest count,
    /// chosen uniformly without replacement.
    pub fn random_mask(d: usize, p: f64, rng: &mut Rng) -> Result<ForwardOperator> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArg(format!("mask fraction {p} outside [0,1]")));
        }
        let hidden = (p * d as f64).round() as usize;
        let mut row = vec![1.0; d];
        for idx in rng.choose_indices(d, hidden) {
            row[idx] = 0.0;
        }
        Ok(ForwardOperator::from_mask_row(Tensor::row(row)))
    }

    /// Circular convolution with a Gaussian kernel truncated at 2σ and
    /// normalized to unit sum, so a constant signal is preserved.
    pub fn blur(d: usize, sigma: f64) -> Result<ForwardOperator> {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::InvalidArg(format!("blur sigma {sigma} must be positive")));
        }
        let r = (2.0 * sigma).floor() as i64;
        let mut kernel: Vec<f64> = (-r..=r)
            .map(|delta| (-((delta * delta) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        for k in &mut kernel {
            *k /= total;
        }
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for (ki, delta) in (-r..=r).enumerate() {
                let j = (i as i64 - delta).rem_euclid(d as i64) as usize;
                m[j * d + i] += kernel[ki];
            }
        }
        Ok(ForwardOperator {
            desc: format!("blur:sigma={sigma}"),
            in_dim: d,
            out_dim: d,
            body: OpBody::Dense(Tensor::constant(d, d, m)),
        })
    }

    /// Non-overlapping mean pooling by an integer factor.
    pub fn downsample(d: usize, f: usize) -> Result<ForwardOperator> {
        if f == 0 || d % f != 0 {
            return Err(Error::InvalidArg(format!(
                "downsample factor {f} must divide dim {d}"
            )));
        }
        let out = d / f;
        let mut m = vec![0.0; d * out];
        for i in 0..out {
            for j in i * f..(i + 1) * f {
                m[j * out + i] = 1.0 / f as f64;
            }
        }
        Ok(ForwardOperator {
            desc: format!("down:f={f}"),
            in_dim: d,
            out_dim: out,
            body: OpBody::Dense(Tensor::constant(d, out, m)),
        })
    }

    /// Sequential composition, applied left to right.
    pub fn composite(ops: Vec<ForwardOperator>) -> Result<ForwardOperator> {
        if ops.is_empty() {
            return Err(Error::InvalidArg("composite of zero operators".into()));
        }
        for w in ops.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::InvalidArg(format!(
                    "composite dim mismatch: {} feeds {}",
                    w[0].out_dim, w[1].in_dim
                )));
            }
        }
        let desc = ops
            .iter()
            .map(|o| o.desc.as_str())
            .collect::<Vec<_>>()
            .join("|");
        Ok(ForwardOperator {
            desc,
            in_dim: ops[0].in_dim,
            out_dim: ops[ops.len() - 1].out_dim,
            body: OpBody::Composite(ops),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn is_linear(&self) -> bool {
        match &self.body {
            OpBody::Composite(ops) => ops.iter().all(|o| o.is_linear()),
            _ => true,
        }
    }

    pub fn desc(&self) -> &str {
        &self.desc
    }

    /// Observation row (1 = measured) when some output coordinates are
    /// structurally unobserved; None means every output entry is a real
    /// measurement. For composites it is the trailing operator's mask.
    pub fn observation_mask(&self) -> Option<&Tensor> {
        match &self.body {
            OpBody::Mask(m) => Some(m),
            OpBody::Composite(ops) => ops.last().unwrap().observation_mask(),
            _ => None,
        }
    }

    /// A(x) on a [B, in_dim] batch, differentiable through x.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "operator apply",
                expected: format!("[_, {}]", self.in_dim),
                got: format!("{:?}", x.shape()),
            });
        }
        Ok(match &self.body {
            OpBody::Identity => x.clone(),
            OpBody::Mask(m) => x.mul(&m.broadcast_rows(x.rows())),
            OpBody::Dense(m) => x.matmul(m),
            OpBody::Composite(ops) => {
                let mut cur = x.clone();
                for op in ops {
                    cur = op.apply(&cur)?;
                }
                cur
            }
        })
    }
}

/// Parsed operator description; `realize` turns it into a concrete operator
/// for a given signal dim, drawing a fresh mask when the spec is a mask
/// family.
#[derive(Debug, Clone, PartialEq)]
pub enum OpSpec {
    Identity,
    Mask { p: f64 },
    Blur { sigma: f64 },
    Down { f: usize },
}

impl OpSpec {
    /// Grammar: `id`, `mask:p=0.3`, `blur:sigma=1.0`, `down:f=2`.
    pub fn parse(s: &str) -> Result<OpSpec> {
        let bad = |msg: String| Err(Error::Format(msg));
        if s == "id" {
            return Ok(OpSpec::Identity);
        }
        let Some((head, arg)) = s.split_once(':') else {
            return bad(format!("operator spec {s:?}: expected id, mask:p=, blur:sigma=, down:f="));
        };
        let Some((key, val)) = arg.split_once('=') else {
            return bad(format!("operator spec {s:?}: expected key=value after ':'"));
        };
        match (head, key) {
            ("mask", "p") => {
                let p: f64 = val
                    .parse()
                    .map_err(|_| Error::Format(format!("operator spec {s:?}: bad fraction")))?;
                if !(0.0..=1.0).contains(&p) {
                    return bad(format!("operator spec {s:?}: fraction outside [0,1]"));
                }
                Ok(OpSpec::Mask { p })
            }
            ("blur", "sigma") => {
                let sigma: f64 = val
                    .parse()
                    .map_err(|_| Error::Format(format!("operator spec {s:?}: bad sigma")))?;
                if sigma <= 0.0 {
                    return bad(format!("operator spec {s:?}: sigma must be positive"));
                }
                Ok(OpSpec::Blur { sigma })
            }
            ("down", "f") => {
                let f: usize = val
                    .parse()
                    .map_err(|_| Error::Format(format!("operator spec {s:?}: bad factor")))?;
                if f == 0 {
                    return bad(format!("operator spec {s:?}: factor must be ≥ 1"));
                }
                Ok(OpSpec::Down { f })
            }
            _ => bad(format!("operator spec {s:?}: unknown operator")),
        }
    }

    pub fn to_string_repr(&self) -> String {
        match self {
            OpSpec::Identity => "id".into(),
            OpSpec::Mask { p } => format!("mask:p={p}"),
            OpSpec::Blur { sigma } => format!("blur:sigma={sigma}"),
            OpSpec::Down { f } => format!("down:f={f}"),
        }
    }

    pub fn realize(&self, d: usize, rng: &mut Rng) -> Result<ForwardOperator> {
        match self {
            OpSpec::Identity => Ok(ForwardOperator::identity(d)),
            OpSpec::Mask { p } => ForwardOperator::random_mask(d, *p, rng),
            OpSpec::Blur { sigma } => ForwardOperator::blur(d, *sigma),
            OpSpec::Down { f } => ForwardOperator::downsample(d, *f),
        }
    }

    pub fn is_mask(&self) -> bool {
        matches!(self, OpSpec::Mask { .. })
    }
}

pub struct Measurement {
    pub y: Tensor,
    /// None when the operator is withheld from the consumer (blind use);
    /// training synthesis always records it so the fidelity term has A.
    pub operator: Option<ForwardOperator>,
    pub sigma_y: f64,
    pub id: u64,
}

/// y = A(x) + σ_y·ε with the noise restricted to observed coordinates, so a
/// masked entry of y is exactly zero. The ground truth x is not stored.
pub fn measure(
    op: &ForwardOperator,
    x: &Tensor,
    sigma_y: f64,
    id: u64,
    rng: &mut Rng,
) -> Result<Measurement> {
    if sigma_y < 0.0 {
        return Err(Error::InvalidArg(format!("sigma_y {sigma_y} must be ≥ 0")));
    }
    let clean = op.apply(x)?.detach();
    let mut y = clean.to_vec();
    if sigma_y > 0.0 {
        match op.observation_mask() {
            Some(m) => {
                for (v, &obs) in y.iter_mut().zip(m.data()) {
                    if obs != 0.0 {
                        *v += sigma_y * rng.normal();
                    }
                }
            }
            None => {
                for v in &mut y {
                    *v += sigma_y * rng.normal();
                }
            }
        }
    }
    Ok(Measurement {
        y: Tensor::constant(1, op.out_dim(), y),
        operator: Some(op.clone()),
        sigma_y,
        id,
    })
}

/// Condition vector handed to the flow. Masked-signal mode passes y through
/// unchanged (masked entries are already zero), so nothing about hidden
/// coordinates leaks; the plus-mask mode appends the binary observation row
/// and requires the operator to be present and masking.
pub fn condition_vector(meas: &Measurement, mode: ConditionMode) -> Result<Tensor> {
    match mode {
        ConditionMode::MaskedSignal => Ok(meas.y.clone()),
        ConditionMode::MaskedSignalPlusMask => {
            let op = meas.operator.as_ref().ok_or_else(|| {
                Error::InvalidArg("plus-mask conditioning on a blind measurement".into())
            })?;
            let m = op.observation_mask().ok_or_else(|| {
                Error::InvalidArg("plus-mask conditioning on a non-masking operator".into())
            })?;
            Ok(meas.y.concat_cols(m))
        }
    }
}

/// Condition width for a signal dim under a mode, fixed across a flow's life.
pub fn condition_dim(y_dim: usize, mode: ConditionMode) -> usize {
    match mode {
        ConditionMode::MaskedSignal => y_dim,
        ConditionMode::MaskedSignalPlusMask => 2 * y_dim,
    }
}

/// Operator view over a whole batch: one operator shared by every row, or a
/// stacked [B,d] mask with one row per measurement.
pub enum BatchOp {
    Shared(ForwardOperator),
    PerItemMasks(Tensor),
}

impl BatchOp {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            BatchOp::Shared(op) => op.apply(x),
            BatchOp::PerItemMasks(masks) => {
                if x.shape() != masks.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "batch mask apply",
                        expected: format!("{:?}", masks.shape()),
                        got: format!("{:?}", x.shape()),
                    });
                }
                Ok(x.mul(masks))
            }
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            BatchOp::Shared(op) => op.out_dim(),
            BatchOp::PerItemMasks(masks) => masks.cols(),
        }
    }
}

pub struct MeasurementSet {
    pub items: Vec<Measurement>,
    pub op_spec: OpSpec,
    pub signal_dim: usize,
    pub sigma_y: f64,
    /// Conditioning hint: true means consumers should condition on the
    /// masked signal alone. Operators are still recorded for the fidelity
    /// term.
    pub blind: bool,
}

impl MeasurementSet {
    /// Synthesize one measurement per row of `xs`, drawing a fresh mask per
    /// row when the spec is a mask family.
    pub fn synthesize(
        xs: &Tensor,
        spec: &OpSpec,
        sigma_y: f64,
        blind: bool,
        rng: &mut Rng,
    ) -> Result<MeasurementSet> {
        let d = xs.cols();
        let shared = if spec.is_mask() {
            None
        } else {
            Some(spec.realize(d, rng)?)
        };
        let mut items = Vec::with_capacity(xs.rows());
        for i in 0..xs.rows() {
            let row = Tensor::constant(1, d, xs.data()[i * d..(i + 1) * d].to_vec());
            let op = match &shared {
                Some(op) => op.clone(),
                None => spec.realize(d, rng)?,
            };
            items.push(measure(&op, &row, sigma_y, i as u64, rng)?);
        }
        Ok(MeasurementSet {
            items,
            op_spec: spec.clone(),
            signal_dim: d,
            sigma_y,
            blind,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Masks drawn per measurement; false means one shared operator.
    pub fn per_item_masks(&self) -> bool {
        self.op_spec.is_mask()
    }

    /// Stack measurements `indices` into ([k,m] y rows, batch operator).
    /// Mask families stack their per-item masks; other specs share one
    /// operator across the set.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, BatchOp)> {
        if indices.is_empty() {
            return Err(Error::InvalidArg("empty measurement batch".into()));
        }
        let m = self.items[indices[0]].y.cols();
        let mut y = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            y.extend_from_slice(self.items[i].y.data());
        }
        let y = Tensor::constant(indices.len(), m, y);
        let op = if self.per_item_masks() {
            let mut rows = Vec::with_capacity(indices.len() * self.signal_dim);
            for &i in indices {
                let mask = self.items[i]
                    .operator
                    .as_ref()
                    .and_then(|o| o.observation_mask())
                    .ok_or_else(|| Error::InvalidArg(format!("measurement {i} has no mask")))?;
                rows.extend_from_slice(mask.data());
            }
            BatchOp::PerItemMasks(Tensor::constant(indices.len(), self.signal_dim, rows))
        } else {
            let op = self.items[indices[0]]
                .operator
                .clone()
                .ok_or_else(|| Error::InvalidArg("measurement set carries no operator".into()))?;
            BatchOp::Shared(op)
        };
        Ok((y, op))
    }

    /// [k, cond_dim] condition rows for the flow.
    pub fn conditions(&self, indices: &[usize], mode: ConditionMode) -> Result<Tensor> {
        let (y, op) = self.batch(indices)?;
        match mode {
            ConditionMode::MaskedSignal => Ok(y),
            ConditionMode::MaskedSignalPlusMask => match op {
                BatchOp::PerItemMasks(masks) => Ok(y.concat_cols(&masks)),
                BatchOp::Shared(_) => Err(Error::InvalidArg(
                    "plus-mask conditioning needs a mask-family measurement set".into(),
                )),
            },
        }
    }

    fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.insert(
            "meta",
            Tensor::row(vec![
                1.0,
                self.items.len() as f64,
                self.signal_dim as f64,
                self.sigma_y,
                if self.blind { 1.0 } else { 0.0 },
            ]),
        );
        let spec_bytes: Vec<f64> = self
            .op_spec
            .to_string_repr()
            .bytes()
            .map(|b| b as f64)
            .collect();
        c.insert("op_spec", Tensor::row(spec_bytes));
        for (i, m) in self.items.iter().enumerate() {
            c.insert(&format!("y{i:06}"), m.y.clone());
            if let Some(mask) = m.operator.as_ref().and_then(|o| o.observation_mask()) {
                c.insert(&format!("mask{i:06}"), mask.clone());
            }
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    fn from_container(c: &Container) -> Result<MeasurementSet> {
        let meta = c.require("meta")?;
        if meta.len() != 5 || meta.data()[0] != 1.0 {
            return Err(Error::Format("unrecognized measurement-set header".into()));
        }
        let n = meta.data()[1] as usize;
        let d = meta.data()[2] as usize;
        let sigma_y = meta.data()[3];
        let blind = meta.data()[4] != 0.0;
        let spec_bytes: Vec<u8> = c.require("op_spec")?.data().iter().map(|&v| v as u8).collect();
        let spec_str = String::from_utf8(spec_bytes)
            .map_err(|_| Error::Format("operator spec is not utf-8".into()))?;
        let op_spec = OpSpec::parse(&spec_str)?;
        let mut items = Vec::with_capacity(n);
        for i in 0..n {
            let y = c.require(&format!("y{i:06}"))?.clone();
            let op = if op_spec.is_mask() {
                ForwardOperator::from_mask_row(c.require(&format!("mask{i:06}"))?.clone())
            } else {
                // Deterministic specs never touch the RNG.
                op_spec.realize(d, &mut Rng::new(0))?
            };
            if y.cols() != op.out_dim() {
                return Err(Error::Format(format!(
                    "measurement {i}: y dim {} does not match operator output {}",
                    y.cols(),
                    op.out_dim()
                )));
            }
            items.push(Measurement {
                y,
                operator: Some(op),
                sigma_y,
                id: i as u64,
            });
        }
        Ok(MeasurementSet {
            items,
            op_spec,
            signal_dim: d,
            sigma_y,
            blind,
        })
    }

    /// Training-side loader: refuses containers that carry ground truth, so
    /// an evaluation set cannot be fed to distillation by accident.
    pub fn load(path: &Path) -> Result<MeasurementSet> {
        let c = Container::load(path)?;
        if c.names().any(|n| n.starts_with("gt")) {
            return Err(Error::Format(
                "container carries ground truth; refusing to load it as a training set".into(),
            ));
        }
        MeasurementSet::from_container(&c)
    }
}

/// Measurements plus the signals that produced them; only the evaluation
/// harness consumes this.
pub struct EvalSet {
    pub set: MeasurementSet,
    pub truths: Vec<Tensor>,
}

impl EvalSet {
    pub fn synthesize(
        xs: &Tensor,
        spec: &OpSpec,
        sigma_y: f64,
        blind: bool,
        rng: &mut Rng,
    ) -> Result<EvalSet> {
        let set = MeasurementSet::synthesize(xs, spec, sigma_y, blind, rng)?;
        let d = xs.cols();
        let truths = (0..xs.rows())
            .map(|i| Tensor::constant(1, d, xs.data()[i * d..(i + 1) * d].to_vec()))
            .collect();
        Ok(EvalSet { set, truths })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = self.set.to_container();
        for (i, gt) in self.truths.iter().enumerate() {
            c.insert(&format!("gt{i:06}"), gt.clone());
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<EvalSet> {
        let c = Container::load(path)?;
        let set = MeasurementSet::from_container(&c)?;
        let mut truths = Vec::with_capacity(set.len());
        for i in 0..set.len() {
            truths.push(c.require(&format!("gt{i:06}"))?.clone());
        }
        Ok(EvalSet { set, truths })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyKind {
    Gauss2d,
    Mixture2d,
    Moons,
    Blobs8x8,
    SphereField,
}

impl ToyKind {
    pub fn parse(s: &str) -> Result<ToyKind> {
        match s {
            "gauss2d" => Ok(ToyKind::Gauss2d),
            "mixture2d" => Ok(ToyKind::Mixture2d),
            "moons" => Ok(ToyKind::Moons),
            "blobs8x8" => Ok(ToyKind::Blobs8x8),
            "sphere_field" => Ok(ToyKind::SphereField),
            other => Err(Error::Format(format!("unknown dataset kind {other:?}"))),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ToyKind::Gauss2d | ToyKind::Mixture2d | ToyKind::Moons => 2,
            ToyKind::Blobs8x8 => 64,
            ToyKind::SphereField => SPHERE_LON * SPHERE_LAT,
        }
    }
}

/// gauss2d ground truth: mean and covariance (x = μ + L·ε with L the
/// Cholesky factor of Σ).
pub const GAUSS2D_MEAN: [f64; 2] = [0.4, -0.2];
pub const GAUSS2D_COV: [[f64; 2]; 2] = [[1.0, 0.6], [0.6, 1.0]];

/// mixture2d ground truth, exposed so an analytic score can be built over
/// exactly the sampled distribution.
pub fn mixture2d_components() -> Vec<(f64, [f64; 2], [f64; 2])> {
    vec![
        (0.4, [-2.0, 0.0], [0.3, 0.3]),
        (0.35, [2.0, 1.0], [0.25, 0.4]),
        (0.25, [0.5, -2.0], [0.35, 0.2]),
    ]
}

pub const SPHERE_LON: usize = 16;
pub const SPHERE_LAT: usize = 8;

/// Random low-order harmonic field on the sphere: a degree ≤ 2 combination
/// of sin/cos in longitude with smooth colatitude envelopes. Periodic in
/// longitude by construction.
pub struct SphereField {
    coeffs: [f64; 9],
}

impl SphereField {
    pub fn random(rng: &mut Rng) -> SphereField {
        let mut coeffs = [0.0; 9];
        // damp higher degrees so fields stay smooth
        let damp = [1.0, 0.7, 0.7, 0.7, 0.4, 0.4, 0.4, 0.4, 0.4];
        for (c, &w) in coeffs.iter_mut().zip(&damp) {
            *c = rng.normal() * w;
        }
        SphereField { coeffs }
    }

    /// lon ∈ [0,2π) (periodic), lat = colatitude ∈ [0,π].
    pub fn eval(&self, lon: f64, lat: f64) -> f64 {
        let (ct, st) = (lat.cos(), lat.sin());
        let basis = [
            1.0,
            ct,
            st * lon.cos(),
            st * lon.sin(),
            0.5 * (3.0 * ct * ct - 1.0),
            st * ct * lon.cos(),
            st * ct * lon.sin(),
            st * st * (2.0 * lon).cos(),
            st * st * (2.0 * lon).sin(),
        ];
        self.coeffs.iter().zip(&basis).map(|(c, b)| c * b).sum()
    }

    /// Row-major [lat, lon] grid, min-max normalized to [0,1].
    pub fn to_grid(&self) -> Vec<f64> {
        let mut vals = Vec::with_capacity(SPHERE_LAT * SPHERE_LON);
        for i in 0..SPHERE_LAT {
            let lat = std::f64::consts::PI * (i as f64 + 0.5) / SPHERE_LAT as f64;
            for j in 0..SPHERE_LON {
                let lon = 2.0 * std::f64::consts::PI * j as f64 / SPHERE_LON as f64;
                vals.push(self.eval(lon, lat));
            }
        }
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            return vec![0.5; vals.len()];
        }
        vals.iter().map(|v| (v - lo) / (hi - lo)).collect()
    }
}

fn gen_blob_row(rng: &mut Rng) -> Vec<f64> {
    let bumps = 1 + rng.below(2);
    let mut img = vec![0.0f64; 64];
    for _ in 0..bumps {
        let cx = rng.uniform_in(0.0, 7.0);
        let cy = rng.uniform_in(0.0, 7.0);
        let sigma = rng.uniform_in(1.0, 1.8);
        let amp = rng.uniform_in(0.6, 1.0);
        for (idx, v) in img.iter_mut().enumerate() {
            let (px, py) = ((idx % 8) as f64, (idx / 8) as f64);
            let d2 = (px - cx).powi(2) + (py - cy).powi(2);
            *v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// n draws from a toy data distribution, one sample per row.
pub fn gen_toy_dataset(kind: ToyKind, n: usize, rng: &mut Rng) -> Tensor {
    assert!(n >= 1);
    let d = kind.dim();
    let mut data = Vec::with_capacity(n * d);
    match kind {
        ToyKind::Gauss2d => {
            // Cholesky factor of GAUSS2D_COV
            let (l00, l10) = (1.0, 0.6);
            let l11 = (GAUSS2D_COV[1][1] - l10 * l10).sqrt();
            for _ in 0..n {
                let (e0, e1) = (rng.normal(), rng.normal());
                data.push(GAUSS2D_MEAN[0] + l00 * e0);
                data.push(GAUSS2D_MEAN[1] + l10 * e0 + l11 * e1);
            }
        }
        ToyKind::Mixture2d => {
            let comps = mixture2d_components();
            for _ in 0..n {
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut pick = comps.len() - 1;
                for (k, (w, _, _)) in comps.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                let (_, mu, var) = comps[pick];
                data.push(mu[0] + var[0].sqrt() * rng.normal());
                data.push(mu[1] + var[1].sqrt() * rng.normal());
            }
        }
        ToyKind::Moons => {
            let noise = 0.08;
            for _ in 0..n {
                let t = rng.uniform_in(0.0, std::f64::consts::PI);
                let (x, y) = if rng.uniform() < 0.5 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                data.push(x + noise * rng.normal());
                data.push(y + noise * rng.normal());
            }
        }
        ToyKind::Blobs8x8 => {
            for _ in 0..n {
                data.extend(gen_blob_row(rng));
            }
        }
        ToyKind::SphereField => {
            for _ in 0..n {
                data.extend(SphereField::random(rng).to_grid());
            }
        }
    }
    Tensor::constant(n, d, data)
}

pub struct PointCloudSignal {
    pub vertices: usize,
    pub channels: usize,
    /// Flat [1, V·C] row, vertex-major.
    pub values: Tensor,
    /// Carried for rendering/export only; models never read it.
    pub coords: Option<Arc<Vec<[f64; 3]>>>,
}

impl PointCloudSignal {
    pub fn new(
        vertices: usize,
        channels: usize,
        values: Tensor,
        coords: Option<Arc<Vec<[f64; 3]>>>,
    ) -> Result<PointCloudSignal> {
        if values.len() != vertices * channels {
            return Err(Error::ShapeMismatch {
                op: "point cloud",
                expected: format!("{} values", vertices * channels),
                got: format!("{}", values.len()),
            });
        }
        if let Some(c) = &coords {
            if c.len() != vertices {
                return Err(Error::InvalidArg(format!(
                    "{} coords for {} vertices",
                    c.len(),
                    vertices
                )));
            }
        }
        Ok(PointCloudSignal {
            vertices,
            channels,
            values: Tensor::constant(1, vertices * channels, values.to_vec()),
            coords,
        })
    }

    /// A bare vector is a single-channel signal on V vertices.
    pub fn from_row(values: Tensor) -> PointCloudSignal {
        let v = values.len();
        PointCloudSignal::new(v, 1, values, None).unwrap()
    }
}

/// Named tensors from a container, sorted by name. An empty container is an
/// empty set.
pub fn ingest_dataset(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let c = Container::load(path)?;
    Ok(c.iter().map(|(n, t)| (n.to_string(), t.clone())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_passes_through() {
        let op = ForwardOperator::identity(3);
        let x = Tensor::row(vec![1.0, -2.0, 3.0]);
        assert_eq!(op.apply(&x).unwrap().data(), x.data());
        assert!(op.is_linear());
    }

    #[test]
    fn mask_zeroes_and_is_idempotent() {
        let op = ForwardOperator::from_mask_row(Tensor::row(vec![0.0, 1.0]));
        let x = Tensor::row(vec![5.0, 7.0]);
        let once = op.apply(&x).unwrap();
        assert_eq!(once.data(), &[0.0, 7.0]);
        let twice = op.apply(&once).unwrap();
        assert_eq!(twice.data(), once.data());
    }

    #[test]
    fn random_mask_counts() {
        let mut rng = Rng::new(5);
        let op = ForwardOperator::random_mask(10, 0.3, &mut rng).unwrap();
        let hidden = op
            .observation_mask()
            .unwrap()
            .data()
            .iter()
            .filter(|&&v| v == 0.0)
            .count();
        assert_eq!(hidden, 3);

        // fraction 0.6 of 4160 leaves 1664 observed
        let op = ForwardOperator::random_mask(4160, 0.6, &mut rng).unwrap();
        let observed = op
            .observation_mask()
            .unwrap()
            .data()
            .iter()
            .filter(|&&v| v == 1.0)
            .count();
        assert_eq!(observed, 1664);
    }

    #[test]
    fn blur_preserves_constant_signal() {
        let op = ForwardOperator::blur(9, 1.0).unwrap();
        let x = Tensor::full(1, 9, 0.37);
        let y = op.apply(&x).unwrap();
        for &v in y.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_wraps_circularly() {
        let op = ForwardOperator::blur(8, 1.0).unwrap();
        let mut delta = vec![0.0; 8];
        delta[0] = 1.0;
        let y = op.apply(&Tensor::row(delta)).unwrap();
        // symmetric kernel around the wrap point
        assert!((y.get(0, 1) - y.get(0, 7)).abs() < 1e-15);
        assert!((y.get(0, 2) - y.get(0, 6)).abs() < 1e-15);
        assert!(y.get(0, 7) > 0.0);
        let total: f64 = y.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn downsample_mean_pools() {
        let op = ForwardOperator::downsample(2, 2).unwrap();
        let y = op.apply(&Tensor::row(vec![1.0, 3.0])).unwrap();
        assert_eq!(y.shape(), [1, 1]);
        assert!((y.item() - 2.0).abs() < 1e-15);
        assert!(ForwardOperator::downsample(5, 2).is_err());
    }

    #[test]
    fn operators_are_linear_on_probes() {
        let mut rng = Rng::new(7);
        let ops = vec![
            ForwardOperator::identity(8),
            ForwardOperator::random_mask(8, 0.4, &mut rng).unwrap(),
            ForwardOperator::blur(8, 1.2).unwrap(),
            ForwardOperator::downsample(8, 2).unwrap(),
            ForwardOperator::composite(vec![
                ForwardOperator::blur(8, 1.0).unwrap(),
                ForwardOperator::downsample(8, 4).unwrap(),
            ])
            .unwrap(),
        ];
        for op in &ops {
            let x = Tensor::randn(1, 8, &mut rng);
            let y = Tensor::randn(1, 8, &mut rng);
            let (a, b) = (0.7, -1.3);
            let lhs = op.apply(&x.scale(a).add(&y.scale(b))).unwrap();
            let rhs = op.apply(&x).unwrap().scale(a).add(&op.apply(&y).unwrap().scale(b));
            for (u, v) in lhs.data().iter().zip(rhs.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn composite_checks_dims() {
        let blur = ForwardOperator::blur(8, 1.0).unwrap();
        let down = ForwardOperator::downsample(8, 2).unwrap();
        assert!(ForwardOperator::composite(vec![down.clone(), blur]).is_err());
        let ok = ForwardOperator::composite(vec![
            ForwardOperator::blur(8, 1.0).unwrap(),
            down,
        ])
        .unwrap();
        assert_eq!(ok.in_dim(), 8);
        assert_eq!(ok.out_dim(), 4);
        assert_eq!(ok.desc(), "blur:sigma=1|down:f=2");
    }

    #[test]
    fn noiseless_identity_measurement_is_exact() {
        let op = ForwardOperator::identity(3);
        let x = Tensor::row(vec![0.1, 0.2, 0.3]);
        let m = measure(&op, &x, 0.0, 0, &mut Rng::new(1)).unwrap();
        assert_eq!(m.y.data(), x.data());
        assert_eq!(m.sigma_y, 0.0);
    }

    #[test]
    fn measurement_noise_std_matches() {
        let op = ForwardOperator::identity(1);
        let x = Tensor::row(vec![0.5]);
        let sigma = 0.3;
        let n = 100_000;
        let mut rng = Rng::new(2);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..n {
            let m = measure(&op, &x, sigma, i as u64, &mut rng).unwrap();
            let r = m.y.item() - 0.5;
            sum += r;
            sumsq += r * r;
        }
        let var = sumsq / n as f64 - (sum / n as f64).powi(2);
        let sd = var.sqrt();
        // SE of a sample std is about σ/√(2n)
        let se = sigma / (2.0 * n as f64).sqrt();
        assert!((sd - sigma).abs() < 3.0 * se, "std {sd} vs {sigma}");
    }

    #[test]
    fn masked_entries_of_y_are_exactly_zero() {
        let mut rng = Rng::new(3);
        let op = ForwardOperator::random_mask(12, 0.5, &mut rng).unwrap();
        let x = Tensor::full(1, 12, 2.5);
        let m = measure(&op, &x, 0.4, 0, &mut rng).unwrap();
        let mask = op.observation_mask().unwrap();
        for (i, &obs) in mask.data().iter().enumerate() {
            if obs == 0.0 {
                assert_eq!(m.y.get(0, i), 0.0);
            } else {
                assert!(m.y.get(0, i) != 0.0);
            }
        }
    }

    #[test]
    fn condition_vector_hides_masked_truth() {
        let mut rng = Rng::new(4);
        let op = ForwardOperator::random_mask(10, 0.4, &mut rng).unwrap();
        // ground truth with no zero entries at all
        let x = Tensor::full(1, 10, 3.0);
        let m = measure(&op, &x, 0.1, 0, &mut rng).unwrap();
        let mask = op.observation_mask().unwrap().clone();

        let cond = condition_vector(&m, ConditionMode::MaskedSignal).unwrap();
        assert_eq!(cond.cols(), condition_dim(10, ConditionMode::MaskedSignal));
        for (i, &obs) in mask.data().iter().enumerate() {
            if obs == 0.0 {
                assert_eq!(cond.get(0, i), 0.0);
            }
        }

        let cond2 = condition_vector(&m, ConditionMode::MaskedSignalPlusMask).unwrap();
        assert_eq!(cond2.cols(), 20);
        assert_eq!(&cond2.data()[10..], mask.data());

        let blind = Measurement {
            y: m.y.clone(),
            operator: None,
            sigma_y: m.sigma_y,
            id: 0,
        };
        assert!(condition_vector(&blind, ConditionMode::MaskedSignalPlusMask).is_err());
        assert!(condition_vector(&blind, ConditionMode::MaskedSignal).is_ok());
    }

    #[test]
    fn op_spec_grammar() {
        assert_eq!(OpSpec::parse("id").unwrap(), OpSpec::Identity);
        assert_eq!(OpSpec::parse("mask:p=0.3").unwrap(), OpSpec::Mask { p: 0.3 });
        assert_eq!(
            OpSpec::parse("blur:sigma=1.0").unwrap(),
            OpSpec::Blur { sigma: 1.0 }
        );
        assert_eq!(OpSpec::parse("down:f=2").unwrap(), OpSpec::Down { f: 2 });
        for bad in ["mask", "mask:p=1.5", "blur:sigma=-1", "down:f=0", "warp:x=1"] {
            assert!(OpSpec::parse(bad).is_err(), "{bad} accepted");
        }
    }

    #[test]
    fn gauss2d_moments_match() {
        let n = 100_000;
        let xs = gen_toy_dataset(ToyKind::Gauss2d, n, &mut Rng::new(10));
        let nf = n as f64;
        let mut mean = [0.0; 2];
        for i in 0..n {
            mean[0] += xs.get(i, 0);
            mean[1] += xs.get(i, 1);
        }
        mean[0] /= nf;
        mean[1] /= nf;
        let mut cov = [[0.0; 2]; 2];
        for i in 0..n {
            let a = xs.get(i, 0) - mean[0];
            let b = xs.get(i, 1) - mean[1];
            cov[0][0] += a * a;
            cov[0][1] += a * b;
            cov[1][1] += b * b;
        }
        cov[0][0] /= nf;
        cov[0][1] /= nf;
        cov[1][1] /= nf;
        for k in 0..2 {
            let se = (GAUSS2D_COV[k][k] / nf).sqrt();
            assert!((mean[k] - GAUSS2D_MEAN[k]).abs() < 3.0 * se);
        }
        // SE of a covariance entry is ≈ √((Σii·Σjj + Σij²)/n)
        let checks = [
            (cov[0][0], GAUSS2D_COV[0][0], 0, 0),
            (cov[0][1], GAUSS2D_COV[0][1], 0, 1),
            (cov[1][1], GAUSS2D_COV[1][1], 1, 1),
        ];
        for (got, want, i, j) in checks {
            let se =
                ((GAUSS2D_COV[i][i] * GAUSS2D_COV[j][j] + GAUSS2D_COV[i][j].powi(2)) / nf).sqrt();
            assert!((got - want).abs() < 3.0 * se, "cov[{i}][{j}] {got} vs {want}");
        }
    }

    #[test]
    fn mixture2d_mean_matches() {
        let n = 100_000;
        let xs = gen_toy_dataset(ToyKind::Mixture2d, n, &mut Rng::new(11));
        let comps = mixture2d_components();
        let want: [f64; 2] = [
            comps.iter().map(|(w, mu, _)| w * mu[0]).sum(),
            comps.iter().map(|(w, mu, _)| w * mu[1]).sum(),
        ];
        for k in 0..2 {
            let got: f64 = (0..n).map(|i| xs.get(i, k)).sum::<f64>() / n as f64;
            // mixture coordinate std is < 2; 3 SE with a safe bound
            assert!((got - want[k]).abs() < 3.0 * 2.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn blobs_stay_in_unit_range() {
        let xs = gen_toy_dataset(ToyKind::Blobs8x8, 50, &mut Rng::new(12));
        assert_eq!(xs.shape(), [50, 64]);
        assert!(xs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // at least one bright pixel per image
        for i in 0..50 {
            let peak = (0..64).map(|j| xs.get(i, j)).fold(0.0, f64::max);
            assert!(peak > 0.3, "image {i} nearly empty");
        }
    }

    #[test]
    fn sphere_field_periodic_and_normalized() {
        let mut rng = Rng::new(13);
        let field = SphereField::random(&mut rng);
        for i in 0..5 {
            let lat = std::f64::consts::PI * (i as f64 + 0.5) / 8.0;
            let a = field.eval(0.0, lat);
            let b = field.eval(2.0 * std::f64::consts::PI, lat);
            assert!((a - b).abs() < 1e-12, "seam mismatch {a} vs {b}");
        }
        let xs = gen_toy_dataset(ToyKind::SphereField, 20, &mut rng);
        assert_eq!(xs.shape(), [20, 128]);
        assert!(xs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn moons_geometry() {
        let xs = gen_toy_dataset(ToyKind::Moons, 5000, &mut Rng::new(14));
        assert_eq!(xs.shape(), [5000, 2]);
        // both arcs present: some points well above and well below y = 0.25
        let above = (0..5000).filter(|&i| xs.get(i, 1) > 0.6).count();
        let below = (0..5000).filter(|&i| xs.get(i, 1) < -0.1).count();
        assert!(above > 500 && below > 500);
    }

    #[test]
    fn measurement_set_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.bin");
        let mut rng = Rng::new(15);
        let xs = gen_toy_dataset(ToyKind::Blobs8x8, 6, &mut rng);
        let spec = OpSpec::Mask { p: 0.3 };
        let set = MeasurementSet::synthesize(&xs, &spec, 0.1, false, &mut rng).unwrap();
        assert_eq!(set.len(), 6);
        assert!(set.per_item_masks());
        // fresh mask per measurement: not all masks equal
        let m0 = set.items[0].operator.as_ref().unwrap().observation_mask().unwrap();
        let distinct = set.items.iter().skip(1).any(|m| {
            m.operator.as_ref().unwrap().observation_mask().unwrap().data() != m0.data()
        });
        assert!(distinct);

        set.save(&path).unwrap();
        let back = MeasurementSet::load(&path).unwrap();
        assert_eq!(back.len(), 6);
        assert_eq!(back.op_spec, spec);
        assert_eq!(back.signal_dim, 64);
        assert_eq!(back.sigma_y, 0.1);
        assert!(!back.blind);
        for (a, b) in set.items.iter().zip(&back.items) {
            for (u, v) in a.y.data().iter().zip(b.y.data()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
            let ma = a.operator.as_ref().unwrap().observation_mask().unwrap();
            let mb = b.operator.as_ref().unwrap().observation_mask().unwrap();
            assert_eq!(ma.data(), mb.data());
        }
    }

    #[test]
    fn training_loader_rejects_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.bin");
        let mut rng = Rng::new(16);
        let xs = gen_toy_dataset(ToyKind::Gauss2d, 4, &mut rng);
        let eval = EvalSet::synthesize(&xs, &OpSpec::Identity, 0.05, false, &mut rng).unwrap();
        eval.save(&path).unwrap();

        let err = match MeasurementSet::load(&path) {
            Ok(_) => panic!("eval container accepted as training set"),
            Err(e) => e,
        };
        assert!(err.to_string().contains("ground truth"), "{err}");

        let back = EvalSet::load(&path).unwrap();
        assert_eq!(back.truths.len(), 4);
        for (gt, x) in back.truths.iter().zip(0..4) {
            for k in 0..2 {
                assert_eq!(gt.get(0, k).to_bits(), xs.get(x, k).to_bits());
            }
        }
    }

    #[test]
    fn ingest_handles_empty_and_point_clouds() {
        let dir = tempfile::tempdir().unwrap();
        let empty_path = dir.path().join("empty.bin");
        Container::new().save(&empty_path).unwrap();
        assert!(ingest_dataset(&empty_path).unwrap().is_empty());

        let pc_path = dir.path().join("bunny.bin");
        let mut c = Container::new();
        let vals: Vec<f64> = (0..1888).map(|i| (i as f64 * 0.01).sin()).collect();
        c.insert("signal", Tensor::row(vals));
        c.save(&pc_path).unwrap();
        let loaded = ingest_dataset(&pc_path).unwrap();
        assert_eq!(loaded.len(), 1);
        let pc = PointCloudSignal::from_row(loaded[0].1.clone());
        assert_eq!(pc.vertices, 1888);
        assert_eq!(pc.channels, 1);
        assert_eq!(pc.values.len(), 1888);
    }

    #[test]
    fn batching_stacks_rows_and_masks() {
        let mut rng = Rng::new(20);
        let xs = gen_toy_dataset(ToyKind::Blobs8x8, 5, &mut rng);
        let set =
            MeasurementSet::synthesize(&xs, &OpSpec::Mask { p: 0.4 }, 0.1, false, &mut rng)
                .unwrap();
        let idx = [3, 0, 3];
        let (y, op) = set.batch(&idx).unwrap();
        assert_eq!(y.shape(), [3, 64]);
        assert_eq!(y.data()[..64], *set.items[3].y.data());
        assert_eq!(y.data()[64..128], *set.items[0].y.data());
        let BatchOp::PerItemMasks(masks) = &op else {
            panic!("mask family must stack per-item masks");
        };
        assert_eq!(masks.shape(), [3, 64]);
        // batch apply equals per-item apply
        let probe = Tensor::randn(3, 64, &mut rng);
        let applied = op.apply(&probe).unwrap();
        for (r, &i) in idx.iter().enumerate() {
            let single = set.items[i].operator.as_ref().unwrap();
            let row = Tensor::constant(1, 64, probe.data()[r * 64..(r + 1) * 64].to_vec());
            let want = single.apply(&row).unwrap();
            for j in 0..64 {
                assert_eq!(applied.get(r, j), want.get(0, j));
            }
        }

        let conds = set.conditions(&idx, ConditionMode::MaskedSignal).unwrap();
        assert_eq!(conds.data(), y.data());
        let conds2 = set
            .conditions(&idx, ConditionMode::MaskedSignalPlusMask)
            .unwrap();
        assert_eq!(conds2.shape(), [3, 128]);
        assert_eq!(conds2.data()[64..128], masks.data()[..64]);

        // shared operator path
        let down_set =
            MeasurementSet::synthesize(&xs, &OpSpec::Down { f: 2 }, 0.0, false, &mut rng).unwrap();
        let (y2, op2) = down_set.batch(&[0, 1]).unwrap();
        assert_eq!(y2.shape(), [2, 32]);
        assert!(matches!(op2, BatchOp::Shared(_)));
        assert!(down_set
            .conditions(&[0], ConditionMode::MaskedSignalPlusMask)
            .is_err());
    }

    #[test]
    fn apply_through_graph_is_differentiable() {
        // fidelity-style objective through a mask: d/dx ‖y − A(x)‖² exists
        // and is zero at masked coordinates
        let op = ForwardOperator::from_mask_row(Tensor::row(vec![1.0, 0.0, 1.0]));
        let x = Tensor::var(1, 3, vec![0.5, -0.4, 1.2]);
        let y = Tensor::row(vec![0.3, 0.0, 1.0]);
        let r = y.sub(&op.apply(&x).unwrap());
        let loss = r.square().sum();
        let grads = loss.backward().unwrap();
        let g = grads.wrt(&x).unwrap();
        assert!((g[0] - 2.0 * (0.5 - 0.3)).abs() < 1e-12);
        assert_eq!(g[1], 0.0);
        assert!((g[2] - 2.0 * (1.2 - 1.0)).abs() < 1e-12);
    }
}
