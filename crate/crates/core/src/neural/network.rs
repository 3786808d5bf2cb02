use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mat::{gemm, matmul, Mat, View};
use super::NetworkError;
use crate::{ActionVector, StateVector};
use nalgebra::{DMatrix, DVector};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// `(m+n)×128, 128×64, 64×n`
    SmallFcnn,
    /// `(m+n)×1024, 1024×512, 512×n`
    LargeFcnn,
    /// Four pre-activation residual blocks and a linear output layer.
    Residual,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::SmallFcnn, Architecture::LargeFcnn, Architecture::Residual];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::SmallFcnn => "small-fcnn",
            Architecture::LargeFcnn => "large-fcnn",
            Architecture::Residual => "residual",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| NetworkError::InvalidSpec(format!("unknown architecture {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// What the network output represents after denormalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// The network predicts `x(τ+1)` directly.
    NextState,
    /// The network predicts `x(τ+1) - x(τ)`; prediction adds `x(τ)` back.
    #[default]
    Delta,
}

fn default_residual_width() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub architecture: Architecture,
    pub state_dim: usize,
    pub action_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Hidden width of the residual blocks.
    #[serde(default = "default_residual_width")]
    pub residual_width: usize,
    #[serde(default)]
    pub target: TargetMode,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(architecture: Architecture, state_dim: usize, action_dim: usize) -> Self {
        Self {
            architecture,
            state_dim,
            action_dim,
            activation: Activation::Relu,
            residual_width: default_residual_width(),
            target: TargetMode::Delta,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(NetworkError::InvalidSpec(
                "state and action dimensions must be positive".into(),
            ));
        }
        if self.architecture == Architecture::Residual && self.residual_width == 0 {
            return Err(NetworkError::InvalidSpec("residual width must be positive".into()));
        }
        Ok(())
    }
}

/// Per-dimension z-score statistics for network inputs `(x, u)` and targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
}

impl Normalization {
    pub fn identity(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_mean: vec![0.0; input_dim],
            input_std: vec![1.0; input_dim],
            output_mean: vec![0.0; output_dim],
            output_std: vec![1.0; output_dim],
        }
    }

    /// Column means and (population) standard deviations. Near-constant
    /// columns get unit scale.
    pub fn column_stats(rows: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
        let count = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / count).sqrt();
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        (mean, std)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct DenseLayout {
    input: usize,
    output: usize,
    weight: usize,
    bias: Option<usize>,
}

impl DenseLayout {
    fn size(&self) -> usize {
        self.input * self.output + if self.bias.is_some() { self.output } else { 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct NormLayout {
    dim: usize,
    gamma: usize,
    beta: usize,
    /// Offset of the running mean; the running variance follows it.
    stats: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Skip {
    None,
    Identity,
    Projection(DenseLayout),
}

/// `y = skip(x) + dense(act(norm(x)))`
#[derive(Clone, Copy, Debug, PartialEq)]
struct BlockLayout {
    norm: NormLayout,
    dense: DenseLayout,
    skip: Skip,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Op {
    Dense(DenseLayout),
    Act,
    Block(BlockLayout),
}

struct LayoutBuilder {
    params: usize,
    stats: usize,
}

impl LayoutBuilder {
    fn dense(&mut self, input: usize, output: usize, bias: bool) -> DenseLayout {
        let weight = self.params;
        self.params += input * output;
        let bias = bias.then(|| {
            let at = self.params;
            self.params += output;
            at
        });
        DenseLayout {
            input,
            output,
            weight,
            bias,
        }
    }

    fn norm(&mut self, dim: usize) -> NormLayout {
        let gamma = self.params;
        let beta = gamma + dim;
        self.params += 2 * dim;
        let stats = self.stats;
        self.stats += 2 * dim;
        NormLayout {
            dim,
            gamma,
            beta,
            stats,
        }
    }
}

fn build_layout(spec: &NetworkSpec) -> (Vec<Op>, usize, usize) {
    let mut b = LayoutBuilder { params: 0, stats: 0 };
    let input = spec.input_dim();
    let output = spec.state_dim;
    let mut ops = Vec::new();
    let fcnn = |widths: &[usize], ops: &mut Vec<Op>, b: &mut LayoutBuilder| {
        let mut prev = input;
        for &w in widths {
            ops.push(Op::Dense(b.dense(prev, w, true)));
            ops.push(Op::Act);
            prev = w;
        }
        ops.push(Op::Dense(b.dense(prev, output, true)));
    };
    match spec.architecture {
        Architecture::SmallFcnn => fcnn(&[128, 64], &mut ops, &mut b),
        Architecture::LargeFcnn => fcnn(&[1024, 512], &mut ops, &mut b),
        Architecture::Residual => {
            let width = spec.residual_width;
            let norm = b.norm(input);
            let dense = b.dense(input, width, true);
            let proj = b.dense(input, width, false);
            ops.push(Op::Block(BlockLayout {
                norm,
                dense,
                skip: Skip::Projection(proj),
            }));
            for _ in 0..3 {
                let norm = b.norm(width);
                let dense = b.dense(width, width, true);
                ops.push(Op::Block(BlockLayout {
                    norm,
                    dense,
                    skip: Skip::Identity,
                }));
            }
            let norm = b.norm(width);
            let dense = b.dense(width, output, true);
            ops.push(Op::Block(BlockLayout {
                norm,
                dense,
                skip: Skip::None,
            }));
        }
    }
    (ops, b.params, b.stats)
}

/// Trainable parameters, normalization statistics and batch-norm running
/// statistics of a neural dynamics model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Checkpoint", into = "Checkpoint")]
pub struct Network {
    spec: NetworkSpec,
    pub normalization: Normalization,
    params: Vec<f64>,
    running: Vec<f64>,
    ops: Vec<Op>,
}

/// Self-describing serialized form of a [`Network`].
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    spec: NetworkSpec,
    normalization: Normalization,
    params: Vec<f64>,
    running_stats: Vec<f64>,
}

const CHECKPOINT_FORMAT: &str = "neural-ilqr-network/1";

impl From<Network> for Checkpoint {
    fn from(net: Network) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            spec: net.spec,
            normalization: net.normalization,
            params: net.params,
            running_stats: net.running,
        }
    }
}

impl TryFrom<Checkpoint> for Network {
    type Error = NetworkError;

    fn try_from(c: Checkpoint) -> Result<Self, NetworkError> {
        if c.format != CHECKPOINT_FORMAT {
            return Err(NetworkError::InvalidCheckpoint(format!(
                "unknown format {:?}",
                c.format
            )));
        }
        c.spec.validate()?;
        let (ops, n_params, n_stats) = build_layout(&c.spec);
        let n_in = c.spec.input_dim();
        let n_out = c.spec.state_dim;
        let norm = &c.normalization;
        if c.params.len() != n_params
            || c.running_stats.len() != n_stats
            || norm.input_mean.len() != n_in
            || norm.input_std.len() != n_in
            || norm.output_mean.len() != n_out
            || norm.output_std.len() != n_out
        {
            return Err(NetworkError::InvalidCheckpoint(
                "array sizes do not match the network spec".into(),
            ));
        }
        Ok(Network {
            spec: c.spec,
            normalization: c.normalization,
            params: c.params,
            running: c.running_stats,
            ops,
        })
    }
}

/// Per-op values kept from a training forward pass.
pub(crate) enum Cache {
    Dense {
        input: Mat,
    },
    Act {
        pre: Mat,
    },
    Block {
        input: Mat,
        xhat: Mat,
        inv_std: Vec<f64>,
        pre: Mat,
        act: Mat,
    },
}

impl Network {
    /// Seeded fan-in-scaled weights, zero biases, identity normalization.
    pub fn new(spec: NetworkSpec) -> Result<Self, NetworkError> {
        spec.validate()?;
        let (ops, n_params, n_stats) = build_layout(&spec);
        let mut params = vec![0.0; n_params];
        let mut running = vec![0.0; n_stats];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let gain = match spec.activation {
            Activation::Relu => 2.0f64.sqrt(),
            Activation::Tanh => 1.0,
        };
        let init_dense = |d: &DenseLayout, params: &mut [f64], rng: &mut ChaCha8Rng| {
            let bound = gain * (3.0 / d.input as f64).sqrt();
            for w in &mut params[d.weight..d.weight + d.input * d.output] {
                *w = rng.random_range(-bound..bound);
            }
        };
        for op in &ops {
            match op {
                Op::Dense(d) => init_dense(d, &mut params, &mut rng),
                Op::Act => {}
                Op::Block(blk) => {
                    params[blk.norm.gamma..blk.norm.gamma + blk.norm.dim].fill(1.0);
                    running[blk.norm.stats + blk.norm.dim..blk.norm.stats + 2 * blk.norm.dim].fill(1.0);
                    init_dense(&blk.dense, &mut params, &mut rng);
                    if let Skip::Projection(p) = &blk.skip {
                        init_dense(p, &mut params, &mut rng);
                    }
                }
            }
        }
        Ok(Network {
            normalization: Normalization::identity(spec.input_dim(), spec.state_dim),
            spec,
            params,
            running,
            ops,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Number of trainable parameters (weights, biases, batch-norm scale and
    /// shift).
    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Batch-norm running means and variances.
    pub fn running_statistics(&self) -> &[f64] {
        &self.running
    }

    /// Shapes `(rows, cols)` of every weight matrix in forward order.
    pub fn weight_shapes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for op in &self.ops {
            match op {
                Op::Dense(d) => out.push((d.input, d.output)),
                Op::Act => {}
                Op::Block(b) => {
                    out.push((b.dense.input, b.dense.output));
                    if let Skip::Projection(p) = b.skip {
                        out.push((p.input, p.output));
                    }
                }
            }
        }
        out
    }

    /// Sets every weight and bias to zero (batch-norm layers untouched).
    pub fn zero_weights(&mut self) {
        for op in self.ops.clone() {
            let mut clear = |d: &DenseLayout| {
                self.params[d.weight..d.weight + d.size()].fill(0.0);
            };
            match op {
                Op::Dense(d) => clear(&d),
                Op::Act => {}
                Op::Block(b) => {
                    clear(&b.dense);
                    if let Skip::Projection(p) = b.skip {
                        clear(&p);
                    }
                }
            }
        }
    }

    fn check(&self, x: &StateVector, u: &ActionVector) -> Result<(), NetworkError> {
        if x.len() != self.spec.state_dim || u.len() != self.spec.action_dim {
            return Err(NetworkError::ShapeMismatch {
                expected: (self.spec.state_dim, self.spec.action_dim),
                actual: (x.len(), u.len()),
            });
        }
        Ok(())
    }

    fn normalized_input(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let norm = &self.normalization;
        for (i, v) in x.iter().chain(u).enumerate() {
            out[i] = (v - norm.input_mean[i]) / norm.input_std[i];
        }
    }

    fn dense_forward(&self, d: &DenseLayout, input: &Mat) -> Mat {
        let mut out = Mat::zeros(input.rows, d.output);
        let w = View::new(&self.params[d.weight..d.weight + d.input * d.output], d.input, d.output);
        gemm(1.0, View::of(input), w, 0.0, &mut out.data);
        if let Some(b) = d.bias {
            out.add_row_vector(&self.params[b..b + d.output]);
        }
        out
    }

    fn weight_view(&self, d: &DenseLayout) -> View<'_> {
        View::new(&self.params[d.weight..d.weight + d.input * d.output], d.input, d.output)
    }

    fn activate(&self, m: &Mat) -> Mat {
        let act = self.spec.activation;
        Mat::from_vec(m.rows, m.cols, m.data.iter().map(|&z| act.apply(z)).collect())
    }

    /// Frozen batch-norm as per-feature `(scale, shift)`.
    fn norm_affine(&self, n: &NormLayout) -> (Vec<f64>, Vec<f64>) {
        (0..n.dim)
            .map(|j| {
                let mean = self.running[n.stats + j];
                let var = self.running[n.stats + n.dim + j];
                let scale = self.params[n.gamma + j] / (var + BN_EPS).sqrt();
                (scale, self.params[n.beta + j] - mean * scale)
            })
            .unzip()
    }

    fn skip_forward(&self, skip: &Skip, input: &Mat, out: &mut Mat) {
        match skip {
            Skip::None => {}
            Skip::Identity => {
                for (o, i) in out.data.iter_mut().zip(&input.data) {
                    *o += i;
                }
            }
            Skip::Projection(p) => gemm(1.0, View::of(input), self.weight_view(p), 1.0, &mut out.data),
        }
    }

    /// Inference forward pass on normalized inputs (one row per sample).
    pub(crate) fn forward_inference(&self, input: Mat) -> Mat {
        let mut h = input;
        for op in &self.ops {
            h = match op {
                Op::Dense(d) => self.dense_forward(d, &h),
                Op::Act => self.activate(&h),
                Op::Block(b) => {
                    let (scale, shift) = self.norm_affine(&b.norm);
                    let mut n = h.clone();
                    for row in n.data.chunks_exact_mut(b.norm.dim) {
                        for ((v, s), t) in row.iter_mut().zip(&scale).zip(&shift) {
                            *v = *v * s + t;
                        }
                    }
                    let a = self.activate(&n);
                    let mut out = self.dense_forward(&b.dense, &a);
                    self.skip_forward(&b.skip, &h, &mut out);
                    out
                }
            };
        }
        h
    }

    /// Training forward pass: batch statistics in normalization layers and
    /// running statistics updated.
    pub(crate) fn forward_train(&mut self, input: Mat) -> (Mat, Vec<Cache>) {
        let mut caches = Vec::with_capacity(self.ops.len());
        let mut h = input;
        for op in self.ops.clone() {
            h = match op {
                Op::Dense(d) => {
                    let out = self.dense_forward(&d, &h);
                    caches.push(Cache::Dense { input: h });
                    out
                }
                Op::Act => {
                    let out = self.activate(&h);
                    caches.push(Cache::Act { pre: h });
                    out
                }
                Op::Block(b) => {
                    let dim = b.norm.dim;
                    let rows = h.rows as f64;
                    let mut mean = vec![0.0; dim];
                    h.column_sums_into(&mut mean);
                    mean.iter_mut().for_each(|m| *m /= rows);
                    let mut var = vec![0.0; dim];
                    for row in h.data.chunks_exact(dim) {
                        for j in 0..dim {
                            let d = row[j] - mean[j];
                            var[j] += d * d;
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= rows);
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    let mut xhat = h.clone();
                    for row in xhat.data.chunks_exact_mut(dim) {
                        for j in 0..dim {
                            row[j] = (row[j] - mean[j]) * inv_std[j];
                        }
                    }
                    let gamma = &self.params[b.norm.gamma..b.norm.gamma + dim];
                    let beta = &self.params[b.norm.beta..b.norm.beta + dim];
                    let mut pre = xhat.clone();
                    for row in pre.data.chunks_exact_mut(dim) {
                        for j in 0..dim {
                            row[j] = row[j] * gamma[j] + beta[j];
                        }
                    }
                    let unbiased = if h.rows > 1 { rows / (rows - 1.0) } else { 1.0 };
                    for j in 0..dim {
                        let rm = &mut self.running[b.norm.stats + j];
                        *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[j];
                        let rv = &mut self.running[b.norm.stats + dim + j];
                        *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[j] * unbiased;
                    }
                    let act = self.activate(&pre);
                    let mut out = self.dense_forward(&b.dense, &act);
                    self.skip_forward(&b.skip, &h, &mut out);
                    caches.push(Cache::Block {
                        input: h,
                        xhat,
                        inv_std,
                        pre,
                        act,
                    });
                    out
                }
            };
        }
        (h, caches)
    }

    fn dense_backward(
        &self,
        d: &DenseLayout,
        input: &Mat,
        grad: &Mat,
        grads: &mut [f64],
        need_input: bool,
    ) -> Option<Mat> {
        let gw = &mut grads[d.weight..d.weight + d.input * d.output];
        gemm(1.0, View::of(input).t(), View::of(grad), 1.0, gw);
        if let Some(b) = d.bias {
            grad.column_sums_into(&mut grads[b..b + d.output]);
        }
        need_input.then(|| matmul(View::of(grad), self.weight_view(d).t()))
    }

    /// Parameter gradient of the loss whose output gradient is `grad`.
    pub(crate) fn backward(&self, caches: &[Cache], grad: Mat) -> Vec<f64> {
        let mut grads = vec![0.0; self.params.len()];
        let mut g = grad;
        let act = self.spec.activation;
        for (idx, (op, cache)) in self.ops.iter().zip(caches).enumerate().rev() {
            let need_input = idx > 0;
            g = match (op, cache) {
                (Op::Dense(d), Cache::Dense { input }) => {
                    match self.dense_backward(d, input, &g, &mut grads, need_input) {
                        Some(next) => next,
                        None => break,
                    }
                }
                (Op::Act, Cache::Act { pre }) => {
                    let mut next = g;
                    for (v, z) in next.data.iter_mut().zip(&pre.data) {
                        *v *= act.derivative(*z);
                    }
                    next
                }
                (
                    Op::Block(b),
                    Cache::Block {
                        input,
                        xhat,
                        inv_std,
                        pre,
                        act: a,
                    },
                ) => {
                    let dim = b.norm.dim;
                    let mut dn = self
                        .dense_backward(&b.dense, a, &g, &mut grads, true)
                        .expect("requested");
                    for (v, z) in dn.data.iter_mut().zip(&pre.data) {
                        *v *= act.derivative(*z);
                    }
                    let rows = dn.rows as f64;
                    let mut sum_dn = vec![0.0; dim];
                    let mut sum_dn_xhat = vec![0.0; dim];
                    for (drow, xrow) in dn.data.chunks_exact(dim).zip(xhat.data.chunks_exact(dim)) {
                        for j in 0..dim {
                            sum_dn[j] += drow[j];
                            sum_dn_xhat[j] += drow[j] * xrow[j];
                        }
                    }
                    for j in 0..dim {
                        grads[b.norm.gamma + j] += sum_dn_xhat[j];
                        grads[b.norm.beta + j] += sum_dn[j];
                    }
                    if let Skip::Projection(p) = &b.skip {
                        let gw = &mut grads[p.weight..p.weight + p.input * p.output];
                        gemm(1.0, View::of(input).t(), View::of(&g), 1.0, gw);
                    }
                    if !need_input {
                        break;
                    }
                    let gamma = &self.params[b.norm.gamma..b.norm.gamma + dim];
                    // dx = γ·inv_std/B · (B·dn - Σdn - x̂·Σ(dn·x̂))
                    let mut dx = dn;
                    for (drow, xrow) in dx.data.chunks_exact_mut(dim).zip(xhat.data.chunks_exact(dim)) {
                        for j in 0..dim {
                            drow[j] =
                                gamma[j] * inv_std[j] / rows * (rows * drow[j] - sum_dn[j] - xrow[j] * sum_dn_xhat[j]);
                        }
                    }
                    match &b.skip {
                        Skip::None => {}
                        Skip::Identity => {
                            for (d, v) in dx.data.iter_mut().zip(&g.data) {
                                *d += v;
                            }
                        }
                        Skip::Projection(p) => {
                            gemm(1.0, View::of(&g), self.weight_view(p).t(), 1.0, &mut dx.data);
                        }
                    }
                    dx
                }
                _ => unreachable!("cache does not match op"),
            };
        }
        grads
    }

    /// Jacobian of the raw network output with respect to its normalized
    /// input at a single point, in inference mode.
    fn raw_jacobian(&self, input: &[f64]) -> Mat {
        let act = self.spec.activation;
        // Forward, remembering what each op's backward sweep needs.
        enum Tape {
            Dense,
            Act(Vec<f64>),
            Block { mask: Vec<f64>, scale: Vec<f64> },
        }
        let mut tape = Vec::with_capacity(self.ops.len());
        let mut h = Mat::from_vec(1, input.len(), input.to_vec());
        for op in &self.ops {
            h = match op {
                Op::Dense(d) => {
                    tape.push(Tape::Dense);
                    self.dense_forward(d, &h)
                }
                Op::Act => {
                    tape.push(Tape::Act(h.data.iter().map(|z| act.derivative(*z)).collect()));
                    self.activate(&h)
                }
                Op::Block(b) => {
                    let (scale, shift) = self.norm_affine(&b.norm);
                    let pre: Vec<f64> = h
                        .data
                        .iter()
                        .zip(&scale)
                        .zip(&shift)
                        .map(|((v, s), t)| v * s + t)
                        .collect();
                    let mask = pre.iter().map(|z| act.derivative(*z)).collect();
                    let a = Mat::from_vec(1, pre.len(), pre.iter().map(|z| act.apply(*z)).collect());
                    let mut out = self.dense_forward(&b.dense, &a);
                    self.skip_forward(&b.skip, &h, &mut out);
                    tape.push(Tape::Block { mask, scale });
                    out
                }
            };
        }
        // One reverse sweep per output row, all rows at once.
        let mut g = Mat::identity(h.cols);
        for (op, t) in self.ops.iter().zip(&tape).rev() {
            g = match (op, t) {
                (Op::Dense(d), Tape::Dense) => matmul(View::of(&g), self.weight_view(d).t()),
                (Op::Act, Tape::Act(mask)) => {
                    for row in g.data.chunks_exact_mut(mask.len()) {
                        row.iter_mut().zip(mask).for_each(|(v, d)| *v *= d);
                    }
                    g
                }
                (Op::Block(b), Tape::Block { mask, scale }) => {
                    let mut dx = matmul(View::of(&g), self.weight_view(&b.dense).t());
                    for row in dx.data.chunks_exact_mut(mask.len()) {
                        for ((v, d), s) in row.iter_mut().zip(mask).zip(scale) {
                            *v *= d * s;
                        }
                    }
                    match &b.skip {
                        Skip::None => {}
                        Skip::Identity => dx.data.iter_mut().zip(&g.data).for_each(|(d, v)| *d += v),
                        Skip::Projection(p) => gemm(1.0, View::of(&g), self.weight_view(p).t(), 1.0, &mut dx.data),
                    }
                    dx
                }
                _ => unreachable!(),
            };
        }
        g
    }

    /// Predicted next state for a single `(x, u)`.
    pub fn predict(&self, x: &StateVector, u: &ActionVector) -> Result<StateVector, NetworkError> {
        self.check(x, u)?;
        Ok(self.predict_batch(&[(x.clone(), u.clone())])?.remove(0))
    }

    /// Predicted next states for a batch of `(x, u)` pairs.
    pub fn predict_batch(&self, inputs: &[(StateVector, ActionVector)]) -> Result<Vec<StateVector>, NetworkError> {
        let n_in = self.spec.input_dim();
        let mut z = Mat::zeros(inputs.len(), n_in);
        for (i, (x, u)) in inputs.iter().enumerate() {
            self.check(x, u)?;
            self.normalized_input(x.as_slice(), u.as_slice(), z.row_mut(i));
        }
        let out = self.forward_inference(z);
        Ok(inputs
            .iter()
            .enumerate()
            .map(|(i, (x, _))| self.denormalize(out.row(i), x))
            .collect())
    }

    fn denormalize(&self, raw: &[f64], x: &StateVector) -> StateVector {
        let norm = &self.normalization;
        DVector::from_fn(self.spec.state_dim, |i, _| {
            let y = raw[i] * norm.output_std[i] + norm.output_mean[i];
            match self.spec.target {
                TargetMode::NextState => y,
                TargetMode::Delta => x[i] + y,
            }
        })
    }

    /// `(∂N/∂x, ∂N/∂u)` of [`Network::predict`], including the input and
    /// output scalings.
    pub fn input_jacobians(
        &self,
        x: &StateVector,
        u: &ActionVector,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), NetworkError> {
        self.check(x, u)?;
        let n = self.spec.state_dim;
        let m = self.spec.action_dim;
        let mut z = vec![0.0; n + m];
        self.normalized_input(x.as_slice(), u.as_slice(), &mut z);
        let raw = self.raw_jacobian(&z);
        let norm = &self.normalization;
        let full = DMatrix::from_fn(n, n + m, |i, j| {
            raw.data[i * (n + m) + j] * norm.output_std[i] / norm.input_std[j]
        });
        let mut a = full.columns(0, n).into_owned();
        let b = full.columns(n, m).into_owned();
        if self.spec.target == TargetMode::Delta {
            for i in 0..n {
                a[(i, i)] += 1.0;
            }
        }
        Ok((a, b))
    }

    pub fn to_json(&self) -> Result<String, NetworkError> {
        serde_json::to_string(self).map_err(|e| NetworkError::InvalidCheckpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        serde_json::from_str(text).map_err(|e| NetworkError::InvalidCheckpoint(e.to_string()))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NetworkError> {
        std::fs::write(path, self.to_json()?).map_err(|e| NetworkError::Io(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NetworkError> {
        let text = std::fs::read_to_string(path).map_err(|e| NetworkError::Io(e.to_string()))?;
        Self::from_json(&text)
    }
}

/// Free-function form of [`Network::new`].
pub fn init_network(spec: &NetworkSpec) -> Result<Network, NetworkError> {
    Network::new(spec.clone())
}
