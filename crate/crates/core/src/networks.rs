//! The modulated base network and the federated modulator.
//!
//! The base network is an MLP whose hidden activations are modulated
//! per-layer, either by sigmoidal gating (`a ⊗ σ(ζ)`) or by an affine
//! transform (`ζ_a ⊗ a + ζ_b`). The modulator maps a labeled client batch
//! to those per-layer modulation vectors in three stages: a per-example
//! feature extractor, a permutation-invariant mean over the batch, and an
//! MLP head whose output is split into one slice per hidden layer.
//!
//! Parameter sets are immutable value types; forward passes for different
//! clients never share tape state.

use serde::{Deserialize, Serialize};

use crate::autodiff::{one_hot_rows, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};
use rand::Rng;

// ── Configuration ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulationMode {
    Gating,
    Affine,
}

impl Default for ModulationMode {
    fn default() -> Self {
        ModulationMode::Gating
    }
}

/// Architecture of the base network and the modulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input_dim: usize,
    /// Widths of the base network's hidden layers (the modulated ones).
    pub hidden_widths: Vec<usize>,
    pub n_classes: usize,
    /// Widths of the per-example feature extractor; the last entry is the
    /// width of the client representation `z`.
    pub modulator_feature_dims: Vec<usize>,
    /// Hidden widths of the modulator head; it always ends in one linear
    /// layer producing the full modulation vector.
    pub modulator_head_dims: Vec<usize>,
    #[serde(default)]
    pub modulation_mode: ModulationMode,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden_widths.is_empty() {
            return Err(Error::Config("hidden_widths must contain at least one layer".into()));
        }
        if self.hidden_widths.iter().any(|&w| w == 0)
            || self.modulator_feature_dims.iter().any(|&w| w == 0)
            || self.modulator_head_dims.iter().any(|&w| w == 0)
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if self.modulator_feature_dims.is_empty() {
            return Err(Error::Config(
                "modulator_feature_dims must contain at least one layer".into(),
            ));
        }
        Ok(())
    }

    /// Total width of the modulator head output.
    pub fn zeta_width(&self) -> usize {
        let total: usize = self.hidden_widths.iter().sum();
        match self.modulation_mode {
            ModulationMode::Gating => total,
            ModulationMode::Affine => 2 * total,
        }
    }
}

// ── Parameter containers ─────────────────────────────────────────────

/// One dense layer: weight `[in × out]`, bias `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Base network parameters: hidden layers followed by the output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseParams {
    pub layers: Vec<LinearLayer>,
}

impl BaseParams {
    /// Hidden layer count (output layer excluded).
    pub fn n_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        for layer in &self.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut refs = Vec::new();
        self.visit(&mut refs);
        refs.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        load_into(flat, {
            let mut refs = Vec::new();
            self.visit_mut(&mut refs);
            refs
        })
    }
}

/// Modulator parameters: per-example feature extractor, joint transform
/// applied after label concatenation, and the head that emits ζ.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulatorParams {
    pub feature_layers: Vec<LinearLayer>,
    pub joint: LinearLayer,
    pub head_layers: Vec<LinearLayer>,
    hidden_widths: Vec<usize>,
    n_classes: usize,
    mode: ModulationMode,
}

impl ModulatorParams {
    pub fn mode(&self) -> ModulationMode {
        self.mode
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        for layer in self.feature_layers.iter().chain([&self.joint]).chain(&self.head_layers) {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for layer in self
            .feature_layers
            .iter_mut()
            .chain([&mut self.joint])
            .chain(&mut self.head_layers)
        {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
    }
}

/// The complete global model ω = modulator plus base network.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel {
    pub mu: ModulatorParams,
    pub psi: BaseParams,
    pub arch: ArchConfig,
}

impl GlobalModel {
    /// All parameter tensors in canonical order: modulator first, base after.
    pub fn visit<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        self.mu.visit(out);
        self.psi.visit(out);
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        let mut mu_refs = Vec::new();
        self.mu.visit_mut(&mut mu_refs);
        out.extend(mu_refs);
        let mut psi_refs = Vec::new();
        self.psi.visit_mut(&mut psi_refs);
        out.extend(psi_refs);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut refs = Vec::new();
        self.visit(&mut refs);
        refs.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        load_into(flat, {
            let mut refs = Vec::new();
            self.visit_mut(&mut refs);
            refs
        })
    }

    pub fn n_params(&self) -> usize {
        let mut refs = Vec::new();
        self.visit(&mut refs);
        refs.iter().map(|t| t.numel()).sum()
    }
}

fn load_into(flat: &[f64], refs: Vec<&mut Tensor>) -> Result<()> {
    let total: usize = refs.iter().map(|t| t.numel()).sum();
    if flat.len() != total {
        return Err(Error::Shape(format!(
            "flat parameter vector has {} values, model expects {}",
            flat.len(),
            total
        )));
    }
    let mut offset = 0;
    for t in refs {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    Ok(())
}

/// Per-client modulation parameters, one slice per hidden layer.
///
/// In gating mode the stored ζ are raw head outputs; the sigmoid is applied
/// inside [`gate`].
#[derive(Clone, Debug, PartialEq)]
pub enum ModulationParams {
    Gating { zetas: Vec<Tensor> },
    Affine { scales: Vec<Tensor>, biases: Vec<Tensor> },
}

impl ModulationParams {
    pub fn n_layers(&self) -> usize {
        match self {
            ModulationParams::Gating { zetas } => zetas.len(),
            ModulationParams::Affine { scales, .. } => scales.len(),
        }
    }

    pub fn mode(&self) -> ModulationMode {
        match self {
            ModulationParams::Gating { .. } => ModulationMode::Gating,
            ModulationParams::Affine { .. } => ModulationMode::Affine,
        }
    }
}

// ── Initialization ───────────────────────────────────────────────────

const STREAM_MU: u64 = 0x6d75;
const STREAM_PSI: u64 = 0x707369;

fn init_linear(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> LinearLayer {
    // uniform on [-√(3/fan_in), √(3/fan_in)]: symmetric, std = 1/√fan_in
    let bound = (3.0 / fan_in as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    LinearLayer {
        weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized above"),
        bias: Tensor::zeros(vec![fan_out]),
    }
}

fn mlp_layers(rng: &mut impl Rng, dims: &[usize]) -> Vec<LinearLayer> {
    dims.windows(2).map(|w| init_linear(rng, w[0], w[1])).collect()
}

/// Seeded initialization of the full global model. The modulator and the
/// base network draw from independent derived streams, so a base-only
/// model initialized from the same seed is bit-identical to `psi` here.
pub fn init_global(arch: &ArchConfig, seed: u64) -> Result<GlobalModel> {
    arch.validate()?;
    let mu = {
        let mut rng = rng_from(derive_seed(seed, STREAM_MU));
        let feature_dims: Vec<usize> =
            std::iter::once(arch.input_dim).chain(arch.modulator_feature_dims.iter().copied()).collect();
        let feature_layers = mlp_layers(&mut rng, &feature_dims);
        let f = *arch.modulator_feature_dims.last().expect("validated nonempty");
        let joint = init_linear(&mut rng, f + arch.n_classes, f);
        let head_dims: Vec<usize> = std::iter::once(f)
            .chain(arch.modulator_head_dims.iter().copied())
            .chain(std::iter::once(arch.zeta_width()))
            .collect();
        let head_layers = mlp_layers(&mut rng, &head_dims);
        ModulatorParams {
            feature_layers,
            joint,
            head_layers,
            hidden_widths: arch.hidden_widths.clone(),
            n_classes: arch.n_classes,
            mode: arch.modulation_mode,
        }
    };
    let psi = init_base(arch, seed)?;
    Ok(GlobalModel { mu, psi, arch: arch.clone() })
}

/// Seeded initialization of the base network alone (used by the baselines).
pub fn init_base(arch: &ArchConfig, seed: u64) -> Result<BaseParams> {
    arch.validate()?;
    let mut rng = rng_from(derive_seed(seed, STREAM_PSI));
    let dims: Vec<usize> = std::iter::once(arch.input_dim)
        .chain(arch.hidden_widths.iter().copied())
        .chain(std::iter::once(arch.n_classes))
        .collect();
    Ok(BaseParams { layers: mlp_layers(&mut rng, &dims) })
}

// ── Graph builders ───────────────────────────────────────────────────

/// On-tape handles for base network parameters.
pub struct BaseVars {
    layers: Vec<(Var, Var)>,
}

/// On-tape handles for modulator parameters.
pub struct ModVars {
    feature: Vec<(Var, Var)>,
    joint: (Var, Var),
    head: Vec<(Var, Var)>,
}

/// On-tape per-layer modulation handles.
pub enum ZetaVars {
    Gating(Vec<Var>),
    Affine(Vec<(Var, Var)>),
}

/// Record base parameters as tape leaves; the flat list preserves the
/// canonical (weight, bias) order used by gradient extraction.
pub fn stage_base(tape: &mut Tape, psi: &BaseParams) -> (BaseVars, Vec<Var>) {
    let mut layers = Vec::with_capacity(psi.layers.len());
    let mut leaves = Vec::new();
    for layer in &psi.layers {
        let w = tape.leaf(&layer.weight);
        let b = tape.leaf(&layer.bias);
        layers.push((w, b));
        leaves.push(w);
        leaves.push(b);
    }
    (BaseVars { layers }, leaves)
}

pub fn stage_modulator(tape: &mut Tape, mu: &ModulatorParams) -> (ModVars, Vec<Var>) {
    let mut leaves = Vec::new();
    let mut stage = |layer: &LinearLayer, tape: &mut Tape, leaves: &mut Vec<Var>| {
        let w = tape.leaf(&layer.weight);
        let b = tape.leaf(&layer.bias);
        leaves.push(w);
        leaves.push(b);
        (w, b)
    };
    let feature: Vec<(Var, Var)> =
        mu.feature_layers.iter().map(|l| stage(l, tape, &mut leaves)).collect();
    let joint = stage(&mu.joint, tape, &mut leaves);
    let head: Vec<(Var, Var)> = mu.head_layers.iter().map(|l| stage(l, tape, &mut leaves)).collect();
    (ModVars { feature, joint, head }, leaves)
}

fn linear(tape: &mut Tape, x: Var, layer: (Var, Var)) -> Result<Var> {
    let xw = tape.matmul(x, layer.0)?;
    tape.add(xw, layer.1)
}

/// Sigmoidal gating: `a ⊗ σ(ζ)`, σ broadcast over the batch.
pub fn gate_graph(tape: &mut Tape, activations: Var, zeta: Var) -> Result<Var> {
    let factors = tape.sigmoid(zeta);
    tape.mul(activations, factors)
}

/// Affine modulation: `ζ_a ⊗ a + ζ_b`, broadcast over the batch.
pub fn film_graph(tape: &mut Tape, activations: Var, zeta_a: Var, zeta_b: Var) -> Result<Var> {
    let scaled = tape.mul(activations, zeta_a)?;
    tape.add(scaled, zeta_b)
}

/// Forward pass of the (optionally modulated) base network.
///
/// Modulation acts on each hidden layer's post-ReLU activations; the output
/// layer is never modulated.
pub fn base_forward_graph(
    tape: &mut Tape,
    x: Var,
    base: &BaseVars,
    zeta: Option<&ZetaVars>,
) -> Result<Var> {
    let n_hidden = base.layers.len() - 1;
    if let Some(z) = zeta {
        let n = match z {
            ZetaVars::Gating(v) => v.len(),
            ZetaVars::Affine(v) => v.len(),
        };
        if n != n_hidden {
            return Err(Error::Shape(format!(
                "modulation has {} layers, base network has {} hidden layers",
                n, n_hidden
            )));
        }
    }
    let mut h = x;
    for (l, &layer) in base.layers.iter().take(n_hidden).enumerate() {
        let lin = linear(tape, h, layer)?;
        let mut a = tape.relu(lin);
        match zeta {
            Some(ZetaVars::Gating(zs)) => a = gate_graph(tape, a, zs[l])?,
            Some(ZetaVars::Affine(zs)) => a = film_graph(tape, a, zs[l].0, zs[l].1)?,
            None => {}
        }
        h = a;
    }
    linear(tape, h, base.layers[n_hidden])
}

/// Forward pass of the federated modulator.
///
/// Per example: features `h_x(x)` are concatenated with the one-hot label
/// and passed through the joint transform; the per-example vectors are
/// averaged into the client representation `z`; the head maps `z` to the
/// raw modulation vector, which is split into per-layer slices.
pub fn modulator_forward_graph(
    tape: &mut Tape,
    xs: Var,
    labels: &[usize],
    mu_meta: &ModulatorParams,
    vars: &ModVars,
) -> Result<ZetaVars> {
    if labels.is_empty() {
        return Err(Error::Data("empty modulation batch".into()));
    }
    let mut feats = xs;
    for &layer in &vars.feature {
        let lin = linear(tape, feats, layer)?;
        feats = tape.relu(lin);
    }
    let onehot = tape.leaf(&one_hot_rows(labels, mu_meta.n_classes)?);
    let joined = tape.concat_cols(feats, onehot)?;
    let lin = linear(tape, joined, vars.joint)?;
    let per_example = tape.relu(lin);
    let z = tape.mean_rows(per_example)?;
    let f = tape.shape(z)[0];
    let mut h = tape.reshape(z, vec![1, f])?;
    let last = vars.head.len() - 1;
    for (i, &layer) in vars.head.iter().enumerate() {
        let lin = linear(tape, h, layer)?;
        h = if i < last { tape.relu(lin) } else { lin };
    }
    let width = tape.shape(h)[1];
    let flat = tape.reshape(h, vec![width])?;

    let mut offset = 0;
    match mu_meta.mode {
        ModulationMode::Gating => {
            let mut zetas = Vec::with_capacity(mu_meta.hidden_widths.len());
            for &w in &mu_meta.hidden_widths {
                zetas.push(tape.slice(flat, offset, w)?);
                offset += w;
            }
            Ok(ZetaVars::Gating(zetas))
        }
        ModulationMode::Affine => {
            // per-layer layout: [ζ_a | ζ_b]
            let mut pairs = Vec::with_capacity(mu_meta.hidden_widths.len());
            for &w in &mu_meta.hidden_widths {
                let a = tape.slice(flat, offset, w)?;
                let b = tape.slice(flat, offset + w, w)?;
                pairs.push((a, b));
                offset += 2 * w;
            }
            Ok(ZetaVars::Affine(pairs))
        }
    }
}

/// Stage modulation values on a tape (for evaluating a fixed ζ).
pub fn stage_zeta(tape: &mut Tape, zeta: &ModulationParams) -> ZetaVars {
    match zeta {
        ModulationParams::Gating { zetas } => {
            ZetaVars::Gating(zetas.iter().map(|t| tape.leaf(t)).collect())
        }
        ModulationParams::Affine { scales, biases } => ZetaVars::Affine(
            scales
                .iter()
                .zip(biases)
                .map(|(a, b)| (tape.leaf(a), tape.leaf(b)))
                .collect(),
        ),
    }
}

/// Read modulation values out of a tape.
pub fn zeta_values(tape: &Tape, zeta: &ZetaVars) -> ModulationParams {
    match zeta {
        ZetaVars::Gating(vs) => ModulationParams::Gating {
            zetas: vs.iter().map(|&v| tape.value(v)).collect(),
        },
        ZetaVars::Affine(vs) => ModulationParams::Affine {
            scales: vs.iter().map(|&(a, _)| tape.value(a)).collect(),
            biases: vs.iter().map(|&(_, b)| tape.value(b)).collect(),
        },
    }
}

// ── Value-level operations ───────────────────────────────────────────

/// `activations ⊗ σ(zeta)` on plain tensors.
pub fn gate(activations: &Tensor, zeta: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.leaf(activations);
    let z = tape.leaf(zeta);
    let out = gate_graph(&mut tape, a, z)?;
    Ok(tape.value(out))
}

/// `zeta_a ⊗ activations + zeta_b` on plain tensors.
pub fn film(activations: &Tensor, zeta_a: &Tensor, zeta_b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.leaf(activations);
    let za = tape.leaf(zeta_a);
    let zb = tape.leaf(zeta_b);
    let out = film_graph(&mut tape, a, za, zb)?;
    Ok(tape.value(out))
}

/// Logits of the (optionally modulated) base network on plain tensors.
pub fn base_forward(x: &Tensor, psi: &BaseParams, zeta: Option<&ModulationParams>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let (base, _) = stage_base(&mut tape, psi);
    let zeta_vars = zeta.map(|z| stage_zeta(&mut tape, z));
    let logits = base_forward_graph(&mut tape, xv, &base, zeta_vars.as_ref())?;
    Ok(tape.value(logits))
}

/// Predict modulation parameters for one labeled batch.
pub fn modulator_forward(xs: &Tensor, labels: &[usize], mu: &ModulatorParams) -> Result<ModulationParams> {
    let mut tape = Tape::new();
    let xv = tape.leaf(xs);
    let (vars, _) = stage_modulator(&mut tape, mu);
    let zeta = modulator_forward_graph(&mut tape, xv, labels, mu, &vars)?;
    Ok(zeta_values(&tape, &zeta))
}
