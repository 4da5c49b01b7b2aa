//! Shared feature extractor with one primary and `K` auxiliary density heads.

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tape, Tensor, Var};
use crate::density::{default_kernel_bank, make_aux_kernel, KernelSpec};
use crate::error::{Error, Result};
use crate::grid::DenseGrid;
use crate::rng;

/// Size and sigma of one fixed auxiliary kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelShape {
    pub rows: usize,
    pub cols: usize,
    pub sigma: f64,
}

impl From<&KernelSpec> for KernelShape {
    fn from(k: &KernelSpec) -> Self {
        KernelShape {
            rows: k.rows,
            cols: k.cols,
            sigma: k.sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub backbone_channels: Vec<usize>,
    pub backbone_dilations: Vec<usize>,
    pub branch_channels: Vec<usize>,
    pub num_aux_branches: usize,
    pub kernel_bank: Vec<KernelShape>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            backbone_channels: vec![16, 32, 32],
            backbone_dilations: vec![1, 1, 2],
            branch_channels: vec![16, 8, 1],
            num_aux_branches: 4,
            kernel_bank: default_kernel_bank().iter().map(KernelShape::from).collect(),
        }
    }
}

impl ModelConfig {
    /// Sets `K` and a matching kernel bank.
    pub fn with_aux_branches(mut self, k: usize) -> Self {
        self.num_aux_branches = k;
        self.kernel_bank = crate::density::kernel_bank(k).iter().map(KernelShape::from).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.backbone_channels.is_empty() || self.branch_channels.is_empty() {
            return bad("backbone and branch channel lists must be non-empty".into());
        }
        if self.backbone_channels.iter().chain(&self.branch_channels).any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        if self.backbone_dilations.len() != self.backbone_channels.len() {
            return bad(format!(
                "{} backbone dilations for {} backbone layers",
                self.backbone_dilations.len(),
                self.backbone_channels.len()
            ));
        }
        if self.backbone_dilations.contains(&0) {
            return bad("dilations must be at least 1".into());
        }
        if self.branch_channels.last() != Some(&1) {
            return bad("branch_channels must end in 1".into());
        }
        if self.kernel_bank.len() != self.num_aux_branches {
            return bad(format!(
                "kernel bank has {} kernels for {} auxiliary branches",
                self.kernel_bank.len(),
                self.num_aux_branches
            ));
        }
        for k in &self.kernel_bank {
            make_aux_kernel(k.rows, k.cols, k.sigma)?;
        }
        Ok(())
    }

    pub fn kernels(&self) -> Result<Vec<KernelSpec>> {
        self.kernel_bank
            .iter()
            .map(|k| make_aux_kernel(k.rows, k.cols, k.sigma))
            .collect()
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().unwrap_or(&self.in_channels)
    }

    /// Smallest image side the backbone accepts.
    pub fn min_input_side(&self) -> usize {
        1 + self.backbone_dilations.iter().map(|d| 2 * d).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Parameter,
    pub bias: Parameter,
    pub dilation: usize,
}

impl ConvLayer {
    fn he_init(cout: usize, cin: usize, dilation: usize, rng: &mut rng::Rng) -> Self {
        let fan_in = (cin * 9) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let data = (0..cout * cin * 9).map(|_| normal.sample(rng)).collect();
        ConvLayer {
            weight: Parameter::new(Tensor::new(vec![cout, cin, 3, 3], data).expect("sized")),
            bias: Parameter::new(Tensor::zeros(vec![cout])),
            dilation,
        }
    }

    fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Branch(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub backbone: Vec<ConvLayer>,
    /// Index 0 is the primary branch.
    pub branches: Vec<Vec<ConvLayer>>,
}

/// He-initialised weights and zero biases. The backbone and each branch draw
/// from their own substream, so the primary branch and backbone come out the
/// same whatever `K` is.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = rng::substream(seed, "init/backbone");
    let mut cin = config.in_channels;
    let mut backbone = Vec::with_capacity(config.backbone_channels.len());
    for (&cout, &dil) in config.backbone_channels.iter().zip(&config.backbone_dilations) {
        backbone.push(ConvLayer::he_init(cout, cin, dil, &mut rng));
        cin = cout;
    }
    let features = cin;
    let branches = (0..=config.num_aux_branches)
        .map(|b| {
            let mut rng = rng::substream(seed, &format!("init/branch/{b}"));
            let mut cin = features;
            config
                .branch_channels
                .iter()
                .map(|&cout| {
                    let layer = ConvLayer::he_init(cout, cin, 1, &mut rng);
                    cin = cout;
                    layer
                })
                .collect()
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        backbone,
        branches,
    })
}

impl ModelParams {
    pub fn num_aux(&self) -> usize {
        self.branches.len() - 1
    }

    pub fn group(&self, g: ParamGroup) -> Vec<&Parameter> {
        let layers = match g {
            ParamGroup::Backbone => &self.backbone,
            ParamGroup::Branch(i) => &self.branches[i],
        };
        layers.iter().flat_map(ConvLayer::params).collect()
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> Vec<&mut Parameter> {
        let layers = match g {
            ParamGroup::Backbone => &mut self.backbone,
            ParamGroup::Branch(i) => &mut self.branches[i],
        };
        layers.iter_mut().flat_map(ConvLayer::params_mut).collect()
    }

    /// All parameters in declaration order: backbone, then branches 0..=K.
    pub fn all(&self) -> Vec<&Parameter> {
        self.backbone
            .iter()
            .chain(self.branches.iter().flatten())
            .flat_map(ConvLayer::params)
            .collect()
    }

    pub fn all_mut(&mut self) -> Vec<&mut Parameter> {
        self.backbone
            .iter_mut()
            .chain(self.branches.iter_mut().flatten())
            .flat_map(ConvLayer::params_mut)
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.all().iter().all(|p| p.is_finite())
    }

    pub fn zero_grads(&mut self) {
        self.all_mut().into_iter().for_each(Parameter::zero_grad);
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let mut bind_layer = |l: &ConvLayer| LayerVars {
            weight: tape.param(&l.weight),
            bias: tape.param(&l.bias),
            dilation: l.dilation,
        };
        let backbone = self.backbone.iter().map(&mut bind_layer).collect();
        let branches = self
            .branches
            .iter()
            .map(|b| b.iter().map(&mut bind_layer).collect())
            .collect();
        ModelVars { backbone, branches }
    }

    /// Adds the gradients from `tape` into the parameters of `group`.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &ModelVars, group: ParamGroup) -> Result<()> {
        let (layers, lvars) = match group {
            ParamGroup::Backbone => (&mut self.backbone, &vars.backbone),
            ParamGroup::Branch(i) => (&mut self.branches[i], &vars.branches[i]),
        };
        for (l, v) in layers.iter_mut().zip(lvars) {
            tape.accumulate_grad(v.weight, &mut l.weight)?;
            tape.accumulate_grad(v.bias, &mut l.bias)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
    pub dilation: usize,
}

/// Parameters of one model recorded on a tape.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub backbone: Vec<LayerVars>,
    pub branches: Vec<Vec<LayerVars>>,
}

fn conv_relu(tape: &mut Tape, x: Var, l: &LayerVars) -> Result<Var> {
    let y = tape.conv2d(x, l.weight, l.bias, l.dilation)?;
    tape.relu(y)
}

impl ModelVars {
    pub fn num_aux(&self) -> usize {
        self.branches.len() - 1
    }

    /// Same order as [`ModelParams::all`].
    pub fn all(&self) -> Vec<Var> {
        self.backbone
            .iter()
            .chain(self.branches.iter().flatten())
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    pub fn forward_features(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let shape = tape.shape(image).to_vec();
        let min_side = 1 + self.backbone.iter().map(|l| 2 * l.dilation).sum::<usize>();
        if shape.len() != 3 || shape[1] < min_side || shape[2] < min_side {
            return Err(Error::invalid(format!(
                "image of shape {shape:?} is smaller than the {min_side}x{min_side} receptive field"
            )));
        }
        self.backbone
            .iter()
            .try_fold(image, |x, l| conv_relu(tape, x, l))
    }

    /// Density map from one head; ReLU after every layer keeps it non-negative.
    pub fn forward_branch(&self, tape: &mut Tape, branch: usize, features: Var) -> Result<Var> {
        let layers = self.branches.get(branch).ok_or_else(|| {
            Error::invalid(format!(
                "branch index {branch} out of range 0..={}",
                self.branches.len() - 1
            ))
        })?;
        layers.iter().try_fold(features, |x, l| conv_relu(tape, x, l))
    }

    pub fn forward_primary(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let f = self.forward_features(tape, image)?;
        self.forward_branch(tape, 0, f)
    }

    /// One backbone pass feeding every branch: `(F_0, [F_1..F_K])`.
    pub fn forward_all(&self, tape: &mut Tape, image: Var) -> Result<(Var, Vec<Var>)> {
        let f = self.forward_features(tape, image)?;
        let primary = self.forward_branch(tape, 0, f)?;
        let aux = (1..self.branches.len())
            .map(|k| self.forward_branch(tape, k, f))
            .collect::<Result<_>>()?;
        Ok((primary, aux))
    }
}

/// `[1, H, W]` tensor view of a grayscale image.
pub fn image_tensor(image: &DenseGrid) -> Tensor {
    Tensor::new(vec![1, image.rows(), image.cols()], image.values().to_vec()).expect("sized")
}

/// Map `[1, H, W]` back to a grid.
pub fn map_grid(tape: &Tape, v: Var) -> DenseGrid {
    let s = tape.shape(v);
    DenseGrid::from_vec(s[1], s[2], tape.data(v).to_vec()).expect("sized")
}

/// Predicted count (sum of the primary map) for one image.
pub fn predict_count(params: &ModelParams, image: &DenseGrid) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let x = tape.constant(image_tensor(image));
    let f0 = vars.forward_primary(&mut tape, x)?;
    Ok(tape.data(f0).iter().sum())
}

/// Primary map and every auxiliary map for one image.
pub fn predict_maps(params: &ModelParams, image: &DenseGrid) -> Result<(DenseGrid, Vec<DenseGrid>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let x = tape.constant(image_tensor(image));
    let (f0, aux) = vars.forward_all(&mut tape, x)?;
    Ok((map_grid(&tape, f0), aux.iter().map(|&v| map_grid(&tape, v)).collect()))
}

const CHECKPOINT_FORMAT: &str = "crowdcount-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    config: ModelConfig,
    seed: u64,
    step: u64,
    tensors: Vec<Vec<usize>>,
}

/// Contents of a checkpoint file besides the tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
}

/// One line of compact JSON, then every tensor as little-endian f64 in
/// declaration order.
pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: CheckpointMeta) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        config: params.config.clone(),
        seed: meta.seed,
        step: meta.step,
        tensors: params.all().iter().map(|p| p.value.shape().to_vec()).collect(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for p in params.all() {
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unknown format {:?}", header.format)));
    }
    let mut params = init_model(&header.config, header.seed)?;
    let expected: Vec<Vec<usize>> = params.all().iter().map(|p| p.value.shape().to_vec()).collect();
    if expected != header.tensors {
        return Err(bad("tensor shapes do not match the stored config".into()));
    }
    let mut raw = bytes[nl + 1..].chunks_exact(8);
    let total: usize = expected.iter().map(|s| s.iter().product::<usize>()).sum();
    if raw.len() != total || !raw.remainder().is_empty() {
        return Err(bad(format!("expected {total} values, found {}", raw.len())));
    }
    for p in params.all_mut() {
        for v in p.value.data_mut() {
            let chunk = raw.next().expect("length checked");
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    Ok((
        params,
        CheckpointMeta {
            seed: header.seed,
            step: header.step,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            backbone_channels: vec![4, 4],
            backbone_dilations: vec![1, 2],
            branch_channels: vec![3, 1],
            ..ModelConfig::default().with_aux_branches(2)
        }
    }

    fn rand_image(h: usize, w: usize, seed: u64) -> DenseGrid {
        use rand::Rng;
        let mut r = rng::substream(seed, "img");
        DenseGrid::from_vec(h, w, (0..h * w).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn same_seed_same_params() {
        let a = init_model(&ModelConfig::default(), 3).unwrap();
        let b = init_model(&ModelConfig::default(), 3).unwrap();
        assert_eq!(a, b);
        let c = init_model(&ModelConfig::default(), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn biases_start_at_zero() {
        let p = init_model(&ModelConfig::default(), 1).unwrap();
        for l in p.backbone.iter().chain(p.branches.iter().flatten()) {
            assert!(l.bias.value.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn he_std_matches_fan_in() {
        let cfg = ModelConfig {
            backbone_channels: vec![64, 64],
            backbone_dilations: vec![1, 1],
            ..ModelConfig::default()
        };
        let p = init_model(&cfg, 11).unwrap();
        let w = p.backbone[1].weight.value.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = (2.0 / (64.0 * 9.0f64)).sqrt();
        assert!((std - target).abs() / target < 0.1, "std {std} vs {target}");
    }

    #[test]
    fn primary_and_backbone_do_not_depend_on_k() {
        let a = init_model(&ModelConfig::default().with_aux_branches(0), 5).unwrap();
        let b = init_model(&ModelConfig::default().with_aux_branches(6), 5).unwrap();
        assert_eq!(a.backbone, b.backbone);
        assert_eq!(a.branches[0], b.branches[0]);
        assert_eq!(b.branches.len(), 7);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::default();
        c.backbone_channels.clear();
        assert!(init_model(&c, 0).is_err());
        let mut c = ModelConfig::default();
        c.branch_channels = vec![8, 2];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.num_aux_branches = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_output_shapes() {
        let p = init_model(&ModelConfig::default(), 2).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.constant(image_tensor(&rand_image(12, 10, 1)));
        let f = vars.forward_features(&mut tape, x).unwrap();
        assert_eq!(tape.shape(f), &[32, 12, 10]);
        let (f0, aux) = vars.forward_all(&mut tape, x).unwrap();
        assert_eq!(aux.len(), 4);
        for m in std::iter::once(f0).chain(aux) {
            assert_eq!(tape.shape(m), &[1, 12, 10]);
            assert!(tape.data(m).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn k_zero_returns_no_aux_maps() {
        let p = init_model(&small().with_aux_branches(0), 2).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.constant(image_tensor(&rand_image(9, 9, 1)));
        let (_, aux) = vars.forward_all(&mut tape, x).unwrap();
        assert!(aux.is_empty());
    }

    #[test]
    fn undersized_image_is_rejected() {
        let p = init_model(&ModelConfig::default(), 2).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.constant(image_tensor(&rand_image(8, 20, 1)));
        assert!(vars.forward_features(&mut tape, x).is_err());
    }

    #[test]
    fn branch_index_out_of_range() {
        let p = init_model(&small(), 2).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.constant(image_tensor(&rand_image(9, 9, 1)));
        let f = vars.forward_features(&mut tape, x).unwrap();
        assert!(vars.forward_branch(&mut tape, 3, f).is_err());
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let mut p = init_model(&small(), 2).unwrap();
        for prm in p.all_mut() {
            prm.value.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.constant(image_tensor(&rand_image(9, 9, 1)));
        let (f0, aux) = vars.forward_all(&mut tape, x).unwrap();
        assert!(tape.data(f0).iter().all(|&v| v == 0.0));
        assert!(aux.iter().all(|&a| tape.data(a).iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn identical_branches_give_identical_maps() {
        let mut p = init_model(&small(), 2).unwrap();
        p.branches[2] = p.branches[1].clone();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let x = tape.constant(image_tensor(&rand_image(9, 9, 1)));
        let (_, aux) = vars.forward_all(&mut tape, x).unwrap();
        assert_eq!(tape.data(aux[0]), tape.data(aux[1]));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut p = init_model(&small(), 9).unwrap();
        p.branches[1][0].bias.value.data_mut()[0] = 0.125;
        let meta = CheckpointMeta { seed: 9, step: 42 };
        save_checkpoint(&path, &p, meta).unwrap();
        let (q, m) = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(m, meta);

        let bytes = std::fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let n_values: usize = p.all().iter().map(|x| x.value.len()).sum();
        assert_eq!(bytes.len() - nl - 1, 8 * n_values);
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
