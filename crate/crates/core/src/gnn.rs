//! Encoder–processor–decoder graph network with a hand-written backward pass.
//!
//! * Encoder: a per-cell MLP over `[features, distance to nearest node]`,
//!   mean-aggregated over each node's cell set, then a node MLP.
//! * Processor: `rounds` message-passing rounds. Each round has its own edge
//!   MLP over `[h_src, h_dst]` and node MLP over `[h, mean incoming message]`,
//!   applied as a residual update.
//! * Decoder: an MLP over `[h_nearest_node, distance]` giving one log-space
//!   value per cell, followed by a fixed affine rescaling.
//!
//! Hidden layers use the configured activation; output layers are linear.
//! The first layers of the edge and decoder MLPs act on concatenations that
//! are formed implicitly: node latents are projected once and the
//! projections gathered per edge or per cell.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTensor;
use crate::kernels::gemm_acc;
use crate::mesh::{GridMeshMap, Mesh};

pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::DivAssign
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
}

fn matmul<F: Real>(a: &ArrayView2<F>, b: &ArrayView2<F>) -> Array2<F> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    gemm_acc(a, b, &mut c.view_mut());
    c
}

/// An `rows × bias.len()` array whose every row is `bias`.
fn broadcast_rows<F: Real>(rows: usize, bias: &Array1<F>) -> Array2<F> {
    let width = bias.len();
    let b = bias.as_slice().expect("standard layout");
    let mut out = vec![F::zero(); rows * width];
    for chunk in out.chunks_exact_mut(width.max(1)) {
        chunk.copy_from_slice(b);
    }
    Array2::from_shape_vec((rows, width), out).expect("shape")
}

fn add_column_sums<F: Real>(x: &Array2<F>, acc: &mut Array1<F>) {
    let width = x.ncols();
    let sums = acc.as_slice_mut().expect("standard layout");
    match x.as_slice() {
        Some(data) if width > 0 => {
            for row in data.chunks_exact(width) {
                for (s, &v) in sums.iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
        _ => {
            for row in x.outer_iter() {
                for (s, &v) in sums.iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply<F: Real>(self, z: &mut Array2<F>) {
        if self == Activation::Relu {
            z.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
        }
    }

    /// Multiplies `grad` by the derivative, given the activated output.
    fn backprop<F: Real>(self, grad: &mut Array2<F>, activated: &Array2<F>) {
        if self == Activation::Relu {
            grad.zip_mut_with(activated, |g, &a| {
                if a <= F::zero() {
                    *g = F::zero();
                }
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub input_channels: usize,
    pub latent: usize,
    pub rounds: usize,
    /// Linear layers per MLP (>= 2).
    pub mlp_layers: usize,
    pub activation: Activation,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            input_channels: 47,
            latent: 64,
            rounds: 4,
            mlp_layers: 2,
            activation: Activation::Relu,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.latent == 0 {
            return Err(Error::invalid("layer widths must be >= 1"));
        }
        if self.mlp_layers < 2 {
            return Err(Error::invalid("mlp_layers must be >= 2"));
        }
        Ok(())
    }

    /// Closed-form number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        let (c, l, d, r) = (self.input_channels, self.latent, self.mlp_layers, self.rounds);
        let square = l * l + l;
        let enc_cell = (c + 1) * l + l + (d - 1) * square;
        let enc_node = d * square;
        let per_round = 2 * ((2 * l) * l + l + (d - 1) * square);
        let decoder = (l + 1) * l + l + (d - 2) * square + l + 1;
        enc_cell + enc_node + r * per_round + decoder
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `inputs × outputs`
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub layers: Vec<Linear<F>>,
}

impl<F: Real> Mlp<F> {
    fn glorot(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Linear {
                    weight: Array2::from_shape_simple_fn((w[0], w[1]), || F::of(rng.random_range(-bound..bound))),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Mlp { layers }
    }

    fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().weight.ncols()
    }

    /// Runs layers `start..`, recording each layer's input in `inputs`.
    fn forward_from(&self, start: usize, mut x: Array2<F>, act: Activation, inputs: &mut Vec<Array2<F>>) -> Array2<F> {
        let n = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate().skip(start) {
            let mut z = broadcast_rows(x.nrows(), &layer.bias);
            gemm_acc(&x.view(), &layer.weight.view(), &mut z.view_mut());
            inputs.push(x);
            if l + 1 < n {
                act.apply(&mut z);
            }
            x = z;
        }
        x
    }

    /// Backpropagates through layers `start..`, accumulating into `grads`.
    /// Returns the gradient with respect to the input of layer `start`.
    fn backward_from(
        &self,
        start: usize,
        inputs: &[Array2<F>],
        dout: Array2<F>,
        act: Activation,
        grads: &mut Mlp<F>,
        need_input: bool,
    ) -> Option<Array2<F>> {
        let mut dz = dout;
        for l in (start..self.layers.len()).rev() {
            let x = &inputs[l - start];
            gemm_acc(&x.t(), &dz.view(), &mut grads.layers[l].weight.view_mut());
            add_column_sums(&dz, &mut grads.layers[l].bias);
            if l == start && !need_input {
                return None;
            }
            let mut dx = Array2::zeros((dz.nrows(), x.ncols()));
            gemm_acc(&dz.view(), &self.layers[l].weight.t(), &mut dx.view_mut());
            if l > start {
                act.backprop(&mut dx, x);
            }
            dz = dx;
        }
        Some(dz)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Round<F> {
    pub edge: Mlp<F>,
    pub node: Mlp<F>,
}

/// Fixed rescaling of the decoder output: `prediction = scale * y + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputScale {
    pub scale: f64,
    pub offset: f64,
}

impl Default for OutputScale {
    fn default() -> Self {
        OutputScale { scale: 1.0, offset: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub seed: u64,
    pub hyper: Hyperparams,
    pub output: OutputScale,
    pub enc_cell: Mlp<F>,
    pub enc_node: Mlp<F>,
    pub rounds: Vec<Round<F>>,
    pub decoder: Mlp<F>,
}

/// Gradients share the parameter layout.
pub type Gradients<F> = ModelParams<F>;

pub fn init_params<F: Real>(seed: u64, hyper: Hyperparams) -> Result<ModelParams<F>> {
    hyper.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, l, d) = (hyper.input_channels, hyper.latent, hyper.mlp_layers);
    let dims = |first: usize, last: usize| -> Vec<usize> {
        let mut v = vec![first];
        v.extend(std::iter::repeat_n(l, d - 1));
        v.push(last);
        v
    };
    let enc_cell = Mlp::glorot(&dims(c + 1, l), &mut rng);
    let enc_node = Mlp::glorot(&dims(l, l), &mut rng);
    let rounds = (0..hyper.rounds)
        .map(|_| Round {
            edge: Mlp::glorot(&dims(2 * l, l), &mut rng),
            node: Mlp::glorot(&dims(2 * l, l), &mut rng),
        })
        .collect();
    let decoder = Mlp::glorot(&dims(l + 1, 1), &mut rng);
    Ok(ModelParams {
        seed,
        hyper,
        output: OutputScale::default(),
        enc_cell,
        enc_node,
        rounds,
        decoder,
    })
}

impl<F: Real> ModelParams<F> {
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            seed: self.seed,
            hyper: self.hyper,
            output: self.output,
            enc_cell: self.enc_cell.zeros_like(),
            enc_node: self.enc_node.zeros_like(),
            rounds: self
                .rounds
                .iter()
                .map(|r| Round {
                    edge: r.edge.zeros_like(),
                    node: r.node.zeros_like(),
                })
                .collect(),
            decoder: self.decoder.zeros_like(),
        }
    }

    fn mlps(&self) -> Vec<(String, &Mlp<F>)> {
        let mut v = vec![("encoder.cell".to_string(), &self.enc_cell), ("encoder.node".to_string(), &self.enc_node)];
        for (k, r) in self.rounds.iter().enumerate() {
            v.push((format!("processor.{k}.edge"), &r.edge));
            v.push((format!("processor.{k}.node"), &r.node));
        }
        v.push(("decoder".to_string(), &self.decoder));
        v
    }

    fn mlps_mut(&mut self) -> Vec<&mut Mlp<F>> {
        let mut v = vec![&mut self.enc_cell, &mut self.enc_node];
        for r in &mut self.rounds {
            v.push(&mut r.edge);
            v.push(&mut r.node);
        }
        v.push(&mut self.decoder);
        v
    }

    /// Every tensor in serialization order: encoder cell MLP, encoder node
    /// MLP, then per round the edge and node MLPs, then the decoder; each
    /// MLP lists weight then bias per layer.
    pub fn tensors(&self) -> Vec<(String, &[F])> {
        let mut out = Vec::new();
        for (name, mlp) in self.mlps() {
            for (k, layer) in mlp.layers.iter().enumerate() {
                out.push((format!("{name}.{k}.weight"), layer.weight.as_slice().expect("standard layout")));
                out.push((format!("{name}.{k}.bias"), layer.bias.as_slice().expect("standard layout")));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        for mlp in self.mlps_mut() {
            for layer in &mut mlp.layers {
                out.push(layer.weight.as_slice_mut().expect("standard layout"));
                out.push(layer.bias.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(F::zero());
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = *x * factor;
            }
        }
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let mlp = |m: &Mlp<F>| Mlp {
            layers: m
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.mapv(|x| G::of(x.to_f64().unwrap())),
                    bias: l.bias.mapv(|x| G::of(x.to_f64().unwrap())),
                })
                .collect(),
        };
        ModelParams {
            seed: self.seed,
            hyper: self.hyper,
            output: self.output,
            enc_cell: mlp(&self.enc_cell),
            enc_node: mlp(&self.enc_node),
            rounds: self
                .rounds
                .iter()
                .map(|r| Round {
                    edge: mlp(&r.edge),
                    node: mlp(&r.node),
                })
                .collect(),
            decoder: mlp(&self.decoder),
        }
    }

    /// Checks that every layer shape matches the hyperparameters.
    pub fn check_shapes(&self) -> Result<()> {
        let reference: ModelParams<F> = init_params(0, self.hyper)?;
        if self.rounds.len() != reference.rounds.len() {
            return Err(Error::ShapeMismatch {
                context: "processor rounds".into(),
                expected: reference.rounds.len(),
                actual: self.rounds.len(),
            });
        }
        for ((name, a), (_, b)) in self.mlps().into_iter().zip(reference.mlps()) {
            if a.layers.len() != b.layers.len() {
                return Err(Error::ShapeMismatch {
                    context: format!("{name} layer count"),
                    expected: b.layers.len(),
                    actual: a.layers.len(),
                });
            }
            for (k, (la, lb)) in a.layers.iter().zip(&b.layers).enumerate() {
                if la.weight.dim() != lb.weight.dim() || la.bias.len() != lb.bias.len() {
                    return Err(Error::ShapeMismatch {
                        context: format!("{name}.{k} weight"),
                        expected: lb.weight.len(),
                        actual: la.weight.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Mesh connectivity and grid maps in the layout the network consumes.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub side: usize,
    pub spacing: usize,
    pub n_nodes: usize,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    /// Incoming directed edges per node.
    pub incoming: Vec<Vec<usize>>,
    pub node_cells: Vec<Vec<usize>>,
    pub cell_node: Vec<usize>,
    pub cell_distance: Vec<f64>,
}

impl GraphContext {
    pub fn new(mesh: &Mesh, maps: &GridMeshMap) -> Self {
        let directed = mesh.directed_edges();
        let mut incoming = vec![Vec::new(); mesh.len()];
        for (e, &(_, dst)) in directed.iter().enumerate() {
            incoming[dst].push(e);
        }
        GraphContext {
            side: mesh.side,
            spacing: mesh.spacing,
            n_nodes: mesh.len(),
            edge_src: directed.iter().map(|e| e.0).collect(),
            edge_dst: directed.iter().map(|e| e.1).collect(),
            incoming,
            node_cells: maps.node_cells.clone(),
            cell_node: maps.cell_node.clone(),
            cell_distance: maps.cell_distance.clone(),
        }
    }

    pub fn build(side: usize, spacing: usize) -> Result<Self> {
        let mesh = crate::mesh::build_mesh(side, spacing)?;
        let maps = crate::mesh::build_maps(&mesh, side);
        Ok(GraphContext::new(&mesh, &maps))
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }
}

#[derive(Debug, Clone)]
struct RoundCache<F> {
    h: Array2<F>,
    edge_inputs: Vec<Array2<F>>,
    node_inputs: Vec<Array2<F>>,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    latent: usize,
    enc_cell_inputs: Vec<Array2<F>>,
    enc_node_inputs: Vec<Array2<F>>,
    rounds: Vec<RoundCache<F>>,
    h_final: Array2<F>,
    dec_inputs: Vec<Array2<F>>,
}

fn relu_or_identity<F: Real>(act: Activation, mut z: Array2<F>) -> Array2<F> {
    act.apply(&mut z);
    z
}

/// Forward pass on a normalized feature tensor. Returns one log-space value
/// per patch cell (row-major) and the cache needed by [`backward`].
pub fn forward<F: Real>(
    params: &ModelParams<F>,
    x: &FeatureTensor,
    ctx: &GraphContext,
) -> Result<(Vec<F>, ForwardCache<F>)> {
    let hp = params.hyper;
    let l = hp.latent;
    let act = hp.activation;
    if x.channels != hp.input_channels || params.enc_cell.input_width() != hp.input_channels + 1 {
        return Err(Error::ShapeMismatch {
            context: "encoder.cell.0 input channels".into(),
            expected: params.enc_cell.input_width().saturating_sub(1),
            actual: x.channels,
        });
    }
    if x.side != ctx.side {
        return Err(Error::ShapeMismatch {
            context: "patch side vs mesh".into(),
            expected: ctx.side,
            actual: x.side,
        });
    }
    if params.rounds.len() != hp.rounds {
        return Err(Error::ShapeMismatch {
            context: "processor rounds".into(),
            expected: hp.rounds,
            actual: params.rounds.len(),
        });
    }
    let cells = ctx.cells();
    let c = x.channels;

    // encoder
    let mut enc_in = vec![F::zero(); cells * (c + 1)];
    for ((row, feats), &d) in enc_in.chunks_exact_mut(c + 1).zip(x.data.chunks_exact(c)).zip(&ctx.cell_distance) {
        for (dst, &v) in row.iter_mut().zip(feats) {
            *dst = F::of(v as f64);
        }
        row[c] = F::of(d);
    }
    let enc_in = Array2::from_shape_vec((cells, c + 1), enc_in).expect("shape");
    let mut enc_cell_inputs = Vec::with_capacity(hp.mlp_layers);
    let cell_latent = params.enc_cell.forward_from(0, enc_in, act, &mut enc_cell_inputs);
    let mut agg = Array2::<F>::zeros((ctx.n_nodes, l));
    mean_pool(&cell_latent, &ctx.node_cells, &mut agg);
    let mut enc_node_inputs = Vec::with_capacity(hp.mlp_layers);
    let mut h = params.enc_node.forward_from(0, agg, act, &mut enc_node_inputs);

    // processor
    let mut rounds = Vec::with_capacity(hp.rounds);
    for round in &params.rounds {
        let first = &round.edge.layers[0];
        let proj_src = matmul(&h.view(), &first.weight.slice(s![..l, ..]));
        let proj_dst = matmul(&h.view(), &first.weight.slice(s![l.., ..]));
        let width = first.weight.ncols();
        let mut z1 = broadcast_rows(ctx.edge_src.len(), &first.bias);
        add_gathered(&mut z1, &proj_src, &ctx.edge_src);
        add_gathered(&mut z1, &proj_dst, &ctx.edge_dst);
        debug_assert_eq!(z1.ncols(), width);
        let a1 = relu_or_identity(act, z1);
        let mut edge_inputs = Vec::with_capacity(hp.mlp_layers);
        let messages = round.edge.forward_from(1, a1, act, &mut edge_inputs);
        let mut node_in = Array2::<F>::zeros((ctx.n_nodes, 2 * l));
        node_in.slice_mut(s![.., ..l]).assign(&h);
        let mut pooled = Array2::<F>::zeros((ctx.n_nodes, l));
        mean_pool(&messages, &ctx.incoming, &mut pooled);
        node_in.slice_mut(s![.., l..]).assign(&pooled);
        let mut node_inputs = Vec::with_capacity(hp.mlp_layers);
        let delta = round.node.forward_from(0, node_in, act, &mut node_inputs);
        let next = &h + &delta;
        rounds.push(RoundCache {
            h,
            edge_inputs,
            node_inputs,
        });
        h = next;
    }

    // decoder
    let first = &params.decoder.layers[0];
    let proj = matmul(&h.view(), &first.weight.slice(s![..l, ..]));
    let w_dist = first.weight.row(l);
    let width = first.weight.ncols();
    let mut z1 = broadcast_rows(cells, &first.bias);
    add_gathered(&mut z1, &proj, &ctx.cell_node);
    let w_dist = w_dist.as_slice().expect("standard layout");
    for (row, &d) in z1.as_slice_mut().expect("standard layout").chunks_exact_mut(width).zip(&ctx.cell_distance) {
        let d = F::of(d);
        for (z, &w) in row.iter_mut().zip(w_dist) {
            *z += d * w;
        }
    }
    let a1 = relu_or_identity(act, z1);
    let mut dec_inputs = Vec::with_capacity(hp.mlp_layers);
    let y = params.decoder.forward_from(1, a1, act, &mut dec_inputs);
    let scale = F::of(params.output.scale);
    let offset = F::of(params.output.offset);
    let out: Vec<F> = y.column(0).iter().map(|&v| scale * v + offset).collect();
    if let Some(index) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok((
        out,
        ForwardCache {
            latent: l,
            enc_cell_inputs,
            enc_node_inputs,
            rounds,
            h_final: h,
            dec_inputs,
        },
    ))
}

/// Sums rows of `dz1` into the node each row was gathered from.
fn scatter_rows<F: Real>(dz1: &Array2<F>, targets: &[usize], n_nodes: usize) -> Array2<F> {
    let width = dz1.ncols();
    let mut d = vec![F::zero(); n_nodes * width];
    for (row, &t) in dz1.as_slice().expect("standard layout").chunks_exact(width).zip(targets) {
        for (x, &v) in d[t * width..(t + 1) * width].iter_mut().zip(row) {
            *x += v;
        }
    }
    Array2::from_shape_vec((n_nodes, width), d).expect("shape")
}

/// `dst[r] += src[index[r]]` for every row `r` of `dst`.
fn add_gathered<F: Real>(dst: &mut Array2<F>, src: &Array2<F>, index: &[usize]) {
    let width = dst.ncols();
    let src = src.as_slice().expect("standard layout");
    for (row, &i) in dst.as_slice_mut().expect("standard layout").chunks_exact_mut(width).zip(index) {
        for (x, &v) in row.iter_mut().zip(&src[i * width..(i + 1) * width]) {
            *x += v;
        }
    }
}

/// Row `g` of `out` becomes the mean of the `src` rows listed in `groups[g]`;
/// empty groups give zero rows.
fn mean_pool<F: Real>(src: &Array2<F>, groups: &[Vec<usize>], out: &mut Array2<F>) {
    let width = src.ncols();
    let src = src.as_slice().expect("standard layout");
    for (row, members) in out.as_slice_mut().expect("standard layout").chunks_exact_mut(width).zip(groups) {
        if members.is_empty() {
            continue;
        }
        for &m in members {
            for (x, &v) in row.iter_mut().zip(&src[m * width..(m + 1) * width]) {
                *x += v;
            }
        }
        let inv = F::one() / F::of(members.len() as f64);
        for x in row.iter_mut() {
            *x = *x * inv;
        }
    }
}

/// Adjoint of [`mean_pool`]: spreads each group's gradient over its members.
fn mean_unpool<F: Real>(d_out: &ArrayView2<F>, groups: &[Vec<usize>], rows: usize) -> Array2<F> {
    let width = d_out.ncols();
    let mut d = vec![F::zero(); rows * width];
    for (g, members) in groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let inv = F::one() / F::of(members.len() as f64);
        let grad = d_out.row(g);
        for &m in members {
            for (x, &v) in d[m * width..(m + 1) * width].iter_mut().zip(grad.iter()) {
                *x += inv * v;
            }
        }
    }
    Array2::from_shape_vec((rows, width), d).expect("shape")
}

/// Reverse-mode gradients of a scalar loss given `dL/d(prediction)` per cell.
pub fn backward<F: Real>(
    params: &ModelParams<F>,
    cache: &ForwardCache<F>,
    ctx: &GraphContext,
    grad_output: &[F],
) -> Result<Gradients<F>> {
    let hp = params.hyper;
    let l = hp.latent;
    let act = hp.activation;
    if cache.latent != l || cache.rounds.len() != params.rounds.len() {
        return Err(Error::invalid("forward cache does not match the parameters"));
    }
    crate::error::ensure_len("output gradient", ctx.cells(), grad_output.len())?;
    let mut grads = params.zeros_like();

    // decoder
    let scale = F::of(params.output.scale);
    let dy = Array2::from_shape_fn((ctx.cells(), 1), |(k, _)| grad_output[k] * scale);
    let d_a1 = params
        .decoder
        .backward_from(1, &cache.dec_inputs, dy, act, &mut grads.decoder, true)
        .expect("input gradient requested");
    let mut dz1 = d_a1;
    act.backprop(&mut dz1, &cache.dec_inputs[0]);
    {
        let g = &mut grads.decoder.layers[0];
        add_column_sums(&dz1, &mut g.bias);
        let width = dz1.ncols();
        let mut g_dist = g.weight.row_mut(l);
        let g_dist = g_dist.as_slice_mut().expect("standard layout");
        for (row, &d) in dz1.as_slice().expect("standard layout").chunks_exact(width).zip(&ctx.cell_distance) {
            let d = F::of(d);
            for (x, &v) in g_dist.iter_mut().zip(row) {
                *x += d * v;
            }
        }
    }
    let h = &cache.h_final;
    let d_proj = scatter_rows(&dz1, &ctx.cell_node, ctx.n_nodes);
    gemm_acc(&h.t(), &d_proj.view(), &mut grads.decoder.layers[0].weight.slice_mut(s![..l, ..]));
    let mut dh = matmul(&d_proj.view(), &params.decoder.layers[0].weight.slice(s![..l, ..]).t());

    // processor, last round first
    for (k, rc) in cache.rounds.iter().enumerate().rev() {
        let round = &params.rounds[k];
        let gr = &mut grads.rounds[k];
        let d_node_in = round
            .node
            .backward_from(0, &rc.node_inputs, dh.clone(), act, &mut gr.node, true)
            .expect("input gradient requested");
        dh += &d_node_in.slice(s![.., ..l]);
        let d_mean = d_node_in.slice(s![.., l..]);
        let d_msg = mean_unpool(&d_mean, &ctx.incoming, ctx.edge_src.len());
        let d_a1 = round
            .edge
            .backward_from(1, &rc.edge_inputs, d_msg, act, &mut gr.edge, true)
            .expect("input gradient requested");
        let mut dz1 = d_a1;
        act.backprop(&mut dz1, &rc.edge_inputs[0]);
        add_column_sums(&dz1, &mut gr.edge.layers[0].bias);
        let d_src = scatter_rows(&dz1, &ctx.edge_src, ctx.n_nodes);
        let d_dst = scatter_rows(&dz1, &ctx.edge_dst, ctx.n_nodes);
        {
            let w = &mut gr.edge.layers[0].weight;
            gemm_acc(&rc.h.t(), &d_src.view(), &mut w.slice_mut(s![..l, ..]));
            gemm_acc(&rc.h.t(), &d_dst.view(), &mut w.slice_mut(s![l.., ..]));
        }
        let w = &round.edge.layers[0].weight;
        gemm_acc(&d_src.view(), &w.slice(s![..l, ..]).t(), &mut dh.view_mut());
        gemm_acc(&d_dst.view(), &w.slice(s![l.., ..]).t(), &mut dh.view_mut());
    }

    // encoder
    let d_agg = params
        .enc_node
        .backward_from(0, &cache.enc_node_inputs, dh, act, &mut grads.enc_node, true)
        .expect("input gradient requested");
    let cells = ctx.cells();
    let d_cell = mean_unpool(&d_agg.view(), &ctx.node_cells, cells);
    params
        .enc_cell
        .backward_from(0, &cache.enc_cell_inputs, d_cell, act, &mut grads.enc_cell, false);
    Ok(grads)
}

/// Mean squared error over cells and its gradient.
pub fn mse_and_grad<F: Real>(pred: &[F], truth: &[f64]) -> (f64, Vec<F>) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let d = p.to_f64().unwrap() - t;
            loss += d * d;
            F::of(2.0 * d / n)
        })
        .collect();
    (loss / n, grad)
}

/// Compares analytic gradients of the cell-mean squared error against
/// central finite differences on a random subsample of at least 200
/// parameters covering every tensor. Returns the largest relative error.
pub fn gradient_check(
    params: &ModelParams<f64>,
    x: &FeatureTensor,
    truth: &[f64],
    ctx: &GraphContext,
    epsilon: f64,
    sample_seed: u64,
) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [1e-7, 1e-4]")));
    }
    let loss_of = |p: &ModelParams<f64>| -> Result<f64> {
        let (pred, _) = forward(p, x, ctx)?;
        let (loss, _) = mse_and_grad(&pred, truth);
        if !loss.is_finite() {
            return Err(Error::invalid("non-finite loss in gradient check"));
        }
        Ok(loss)
    };
    let (pred, cache) = forward(params, x, ctx)?;
    let (loss, dpred) = mse_and_grad(&pred, truth);
    if !loss.is_finite() {
        return Err(Error::invalid("non-finite loss in gradient check"));
    }
    let grads = backward(params, &cache, ctx, &dpred)?;
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let mut picks: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(t, &n)| (t, rng.random_range(0..n))).collect();
    let target = 200.min(total);
    while picks.len() < target {
        let mut flat = rng.random_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        if !picks.contains(&(t, flat)) {
            picks.push((t, flat));
        }
    }

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (t, i) in picks {
        let original = params.tensors()[t].1[i];
        probe.tensors_mut()[t][i] = original + epsilon;
        let plus = loss_of(&probe)?;
        probe.tensors_mut()[t][i] = original - epsilon;
        let minus = loss_of(&probe)?;
        probe.tensors_mut()[t][i] = original;
        let fd = (plus - minus) / (2.0 * epsilon);
        let ga = analytic[t][i];
        let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
