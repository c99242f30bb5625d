//! Model state, fake-quantized forward pass, and manual backpropagation.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ActivationKind, Arch, ModelConfig};
use crate::a2q::{A2qForward, A2qGrads, A2qLayerParams, ForwardMode};
use crate::dataio::{Checkpoint, Dataset, LayerState, CHECKPOINT_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::quant::IntRange;

const LN2: f64 = std::f64::consts::LN_2;

/// Per-tensor activation quantizer calibrated by a running max. The max only
/// grows, so re-observing the same data is idempotent and evaluation uses the
/// frozen statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct ActQuant {
    pub bits: u32,
    pub signed: bool,
    pub running_max: f64,
}

impl ActQuant {
    pub fn new(bits: u32, signed: bool) -> Self {
        ActQuant {
            bits,
            signed,
            running_max: 0.0,
        }
    }

    pub fn range(&self) -> IntRange {
        IntRange::new(self.bits, self.signed).expect("validated bits")
    }

    pub fn scale(&self) -> f64 {
        self.running_max.max(1e-12) / self.range().max() as f64
    }

    pub fn observe(&mut self, h: &Array2<f64>) {
        let m = h.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        self.running_max = self.running_max.max(m);
    }

    /// Fake-quantize `h`; returns the fake values, the integer codes, and
    /// the clipped-STE mask (true where the pre-clip value was in range).
    pub fn fake_quantize(
        &self,
        h: &Array2<f64>,
        mode: ForwardMode,
    ) -> (Array2<f64>, Array2<i64>, Array2<bool>) {
        let s = self.scale();
        let range = self.range();
        let (n, p) = (range.min() as f64, range.max() as f64);
        let mut fake = Array2::zeros(h.dim());
        let mut codes = Array2::zeros(h.dim());
        let mut mask = Array2::from_elem(h.dim(), false);
        ndarray::Zip::from(&mut fake)
            .and(&mut codes)
            .and(&mut mask)
            .and(h)
            .for_each(|f, c, m, &v| {
                let u = v / s;
                // mask on the unrounded value: the clip of the surrogate
                // kinks at u = n, p, not at the rounded code
                *m = u >= n && u <= p;
                *c = u.round_ties_even().clamp(n, p) as i64;
                *f = match mode {
                    ForwardMode::Quantized => *c as f64 * s,
                    ForwardMode::SteSurrogate => u.clamp(n, p) * s,
                };
            });
        (fake, codes, mask)
    }
}

/// Baseline per-channel weight quantizer state: real weights plus learned
/// log2 scales, half-way rounding, signed `M`-bit codes with zero point 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineWeights {
    pub w: Array2<f64>,
    pub d: Array1<f64>,
    pub weight_bits: u32,
}

impl BaselineWeights {
    pub fn range(&self) -> IntRange {
        IntRange::new(self.weight_bits, true).expect("validated bits")
    }
}

#[derive(Debug, Clone)]
pub enum LayerWeights {
    Baseline(BaselineWeights),
    A2q(A2qLayerParams),
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub weights: LayerWeights,
    pub bias: Array1<f64>,
}

/// Cached weight-quantization results for one layer's forward pass.
#[derive(Debug, Clone)]
pub enum LayerForward {
    Baseline {
        codes: Array2<i64>,
        fake: Array2<f64>,
        scales: Array1<f64>,
        in_range: Array2<bool>,
    },
    A2q(A2qForward),
}

impl LayerForward {
    pub fn fake(&self) -> &Array2<f64> {
        match self {
            LayerForward::Baseline { fake, .. } => fake,
            LayerForward::A2q(f) => &f.weights.fake,
        }
    }

    pub fn codes(&self) -> &Array2<i64> {
        match self {
            LayerForward::Baseline { codes, .. } => codes,
            LayerForward::A2q(f) => &f.weights.codes,
        }
    }

    pub fn scales(&self) -> &Array1<f64> {
        match self {
            LayerForward::Baseline { scales, .. } => scales,
            LayerForward::A2q(f) => &f.weights.scales,
        }
    }
}

impl Layer {
    pub fn out_features(&self) -> usize {
        match &self.weights {
            LayerWeights::Baseline(b) => b.w.nrows(),
            LayerWeights::A2q(a) => a.channels(),
        }
    }

    pub fn in_features(&self) -> usize {
        match &self.weights {
            LayerWeights::Baseline(b) => b.w.ncols(),
            LayerWeights::A2q(a) => a.fan_in(),
        }
    }

    /// Quantize this layer's weights with the training-path norm handling.
    pub fn forward_weights(&self, mode: ForwardMode) -> LayerForward {
        match &self.weights {
            LayerWeights::Baseline(b) => {
                let range = b.range();
                let (n, p) = (range.min() as f64, range.max() as f64);
                let scales = b.d.mapv(f64::exp2);
                let mut codes = Array2::zeros(b.w.dim());
                let mut fake = Array2::zeros(b.w.dim());
                let mut in_range = Array2::from_elem(b.w.dim(), false);
                for (i, row) in b.w.rows().into_iter().enumerate() {
                    let s = scales[i];
                    for (j, &wv) in row.iter().enumerate() {
                        let u = wv / s;
                        in_range[[i, j]] = u >= n && u <= p;
                        let c = u.round_ties_even().clamp(n, p) as i64;
                        codes[[i, j]] = c;
                        fake[[i, j]] = match mode {
                            ForwardMode::Quantized => c as f64 * s,
                            ForwardMode::SteSurrogate => u.clamp(n, p) * s,
                        };
                    }
                }
                LayerForward::Baseline {
                    codes,
                    fake,
                    scales,
                    in_range,
                }
            }
            LayerWeights::A2q(a) => LayerForward::A2q(a.forward(mode)),
        }
    }

    /// Inference-path quantization: a collapsed A2Q channel norm is an error.
    pub fn forward_weights_strict(&self) -> Result<LayerForward> {
        if let LayerWeights::A2q(a) = &self.weights {
            a.quantize_weights_strict()?;
        }
        Ok(self.forward_weights(ForwardMode::Quantized))
    }
}

/// Gradients for one layer.
#[derive(Debug, Clone)]
pub enum LayerGrads {
    Baseline { w: Array2<f64>, d: Array1<f64> },
    A2q(A2qGrads),
}

#[derive(Debug, Clone)]
pub struct Grads {
    pub layers: Vec<LayerGrads>,
    pub biases: Vec<Array1<f64>>,
}

/// Forward-pass cache for [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Fake-valued input to each layer; `inputs[0]` is the raw batch.
    pub inputs: Vec<Array2<f64>>,
    pub weight_fwd: Vec<LayerForward>,
    /// Pre-activation output of each layer.
    pub preact: Vec<Array2<f64>>,
    /// Clipped-STE masks of each hidden activation quantizer.
    pub act_masks: Vec<Array2<bool>>,
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub input_bits: u32,
    pub input_signed: bool,
    pub num_classes: u32,
    pub layers: Vec<Layer>,
    pub act_quants: Vec<ActQuant>,
}

impl Model {
    /// Initialize a model for `feature_count`-dimensional inputs. Weight
    /// directions start uniform in `+-1/sqrt(fan_in)`; scales start at the
    /// max-abs mapping onto the signed code range; A2Q norm parameters start
    /// at the (cap-clamped) l1 norm of the initial weights.
    pub fn new(
        config: ModelConfig,
        input_bits: u32,
        input_signed: bool,
        feature_count: usize,
        num_classes: u32,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if feature_count == 0 || num_classes == 0 {
            return Err(Error::InvalidParam(
                "feature count and classes must be >= 1".into(),
            ));
        }
        let mut sizes = vec![feature_count];
        if let Arch::Mlp(hidden) = &config.arch {
            sizes.extend_from_slice(hidden);
        }
        sizes.push(num_classes as usize);

        let total_layers = sizes.len() - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(total_layers);
        let mut act_quants = Vec::new();
        for l in 0..total_layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
            let m_bits = config.layer_weight_bits(l, total_layers);
            let (layer_in_bits, layer_in_signed) = if l == 0 {
                (input_bits, input_signed)
            } else {
                (
                    config.act_bits,
                    config.activation == ActivationKind::IdentitySigned,
                )
            };
            let weights = match config.acc_bits {
                Some(p) => LayerWeights::A2q(A2qLayerParams::from_pretrained(
                    &w,
                    m_bits,
                    p,
                    layer_in_bits,
                    layer_in_signed,
                )?),
                None => {
                    let p_max = ((1i64 << (m_bits - 1)) - 1).max(1) as f64;
                    let d = w
                        .rows()
                        .into_iter()
                        .map(|row| {
                            let amax = row.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                            (amax / p_max).max(1e-10).log2()
                        })
                        .collect::<Array1<f64>>();
                    LayerWeights::Baseline(BaselineWeights {
                        w,
                        d,
                        weight_bits: m_bits,
                    })
                }
            };
            layers.push(Layer {
                weights,
                bias: Array1::zeros(fan_out),
            });
            if l + 1 < total_layers {
                act_quants.push(ActQuant::new(
                    config.act_bits,
                    config.activation == ActivationKind::IdentitySigned,
                ));
            }
        }
        Ok(Model {
            config,
            input_bits,
            input_signed,
            num_classes,
            layers,
            act_quants,
        })
    }

    pub fn is_a2q(&self) -> bool {
        self.config.acc_bits.is_some()
    }

    /// Convert a trained baseline model into an accumulator-constrained one
    /// targeting `acc_bits`: every layer's real weights seed the direction
    /// parameters (norm parameters start at the cap-clamped l1 norm) and
    /// activation statistics carry over. Where the cap squashes a channel's
    /// norm, its bias shrinks by the same factor so the initial decision
    /// function keeps its shape.
    pub fn to_a2q(&self, acc_bits: u32) -> Result<Self> {
        let mut out = self.clone();
        out.config.acc_bits = Some(acc_bits);
        let total = self.layers.len();
        for (l, layer) in out.layers.iter_mut().enumerate() {
            let (in_bits, in_signed) = if l == 0 {
                (self.input_bits, self.input_signed)
            } else {
                (
                    self.config.act_bits,
                    self.config.activation == ActivationKind::IdentitySigned,
                )
            };
            let w = match &layer.weights {
                LayerWeights::Baseline(b) => b.w.clone(),
                LayerWeights::A2q(_) => {
                    return Err(Error::InvalidParam(
                        "model is already accumulator-constrained".into(),
                    ));
                }
            };
            let m_bits = self.config.layer_weight_bits(l, total);
            let params = A2qLayerParams::from_pretrained(&w, m_bits, acc_bits, in_bits, in_signed)?;
            for (i, row) in w.rows().into_iter().enumerate() {
                let l1: f64 = row.iter().map(|x| x.abs()).sum();
                if l1 > 0.0 {
                    let squash = (params.t[i].exp2() / l1).min(1.0);
                    layer.bias[i] *= squash;
                }
            }
            layer.weights = LayerWeights::A2q(params);
        }
        Ok(out)
    }

    fn activate(&self, z: &Array2<f64>) -> Array2<f64> {
        match self.config.activation {
            ActivationKind::ReluUnsigned => z.mapv(|v| v.max(0.0)),
            ActivationKind::IdentitySigned => z.clone(),
        }
    }

    /// Fake-quantized forward pass. `calibrate` lets the hidden activation
    /// quantizers update their running max from this batch before quantizing
    /// it (training); evaluation passes keep the statistic frozen.
    pub fn forward(
        &mut self,
        batch: &Array2<f64>,
        mode: ForwardMode,
        calibrate: bool,
    ) -> Result<ForwardCache> {
        if batch.ncols() != self.layers[0].in_features() {
            return Err(Error::ShapeMismatch(format!(
                "batch features {} vs model input {}",
                batch.ncols(),
                self.layers[0].in_features()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut weight_fwd = Vec::with_capacity(self.layers.len());
        let mut preact = Vec::with_capacity(self.layers.len());
        let mut act_masks = Vec::with_capacity(self.act_quants.len());
        let mut a = batch.clone();
        let layer_count = self.layers.len();
        for l in 0..layer_count {
            let wf = self.layers[l].forward_weights(mode);
            let z = a.dot(&wf.fake().t()) + &self.layers[l].bias;
            inputs.push(a);
            preact.push(z.clone());
            weight_fwd.push(wf);
            if l + 1 < layer_count {
                let h = self.activate(&z);
                if calibrate {
                    self.act_quants[l].observe(&h);
                }
                let (fake, _codes, mask) = self.act_quants[l].fake_quantize(&h, mode);
                act_masks.push(mask);
                a = fake;
            } else {
                a = z;
            }
        }
        let logits = a;
        Ok(ForwardCache {
            inputs,
            weight_fwd,
            preact,
            act_masks,
            logits,
        })
    }

    /// Manual backprop from a logit gradient, chaining through the activation
    /// quantizers (clipped STE), the nonlinearity, and each weight quantizer.
    /// The norm-cap hinge gradient (`lambda` times the regularizer) is folded
    /// into the `t` / `d` gradients of A2Q layers here.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &Array2<f64>,
        lambda: f64,
    ) -> Result<Grads> {
        let mut layer_grads: Vec<Option<LayerGrads>> = vec![None; self.layers.len()];
        let mut bias_grads: Vec<Option<Array1<f64>>> = vec![None; self.layers.len()];
        let mut dz = dlogits.clone();
        for l in (0..self.layers.len()).rev() {
            let wf = &cache.weight_fwd[l];
            let a_in = &cache.inputs[l];
            bias_grads[l] = Some(dz.sum_axis(Axis(0)));
            let dw_fake = dz.t().dot(a_in);
            let grads = match (&self.layers[l].weights, wf) {
                (
                    LayerWeights::Baseline(b),
                    LayerForward::Baseline {
                        codes,
                        scales,
                        in_range,
                        ..
                    },
                ) => {
                    let mut gw = Array2::zeros(b.w.dim());
                    let mut gd = Array1::zeros(b.d.len());
                    for i in 0..b.w.nrows() {
                        let s = scales[i];
                        for j in 0..b.w.ncols() {
                            if in_range[[i, j]] {
                                gw[[i, j]] = dw_fake[[i, j]];
                            } else {
                                gd[i] += LN2 * dw_fake[[i, j]] * codes[[i, j]] as f64 * s;
                            }
                        }
                    }
                    LayerGrads::Baseline { w: gw, d: gd }
                }
                (LayerWeights::A2q(params), LayerForward::A2q(fwd)) => {
                    let mut g = params.backward(fwd, &dw_fake)?;
                    if lambda > 0.0 {
                        let caps = params.norm_cap().caps;
                        for i in 0..params.channels() {
                            if params.t[i] > caps[i] {
                                g.t[i] += lambda;
                                g.d[i] -= lambda; // the cap is affine in d
                            }
                        }
                    }
                    LayerGrads::A2q(g)
                }
                _ => unreachable!("forward cache kind matches layer kind"),
            };
            layer_grads[l] = Some(grads);
            if l > 0 {
                let mut da = dz.dot(wf.fake());
                // through the activation quantizer's clipped STE
                ndarray::Zip::from(&mut da)
                    .and(&cache.act_masks[l - 1])
                    .for_each(|g, &m| {
                        if !m {
                            *g = 0.0;
                        }
                    });
                // through the nonlinearity
                if self.config.activation == ActivationKind::ReluUnsigned {
                    ndarray::Zip::from(&mut da)
                        .and(&cache.preact[l - 1])
                        .for_each(|g, &z| {
                            if z <= 0.0 {
                                *g = 0.0;
                            }
                        });
                }
                dz = da;
            }
        }
        Ok(Grads {
            layers: layer_grads.into_iter().map(Option::unwrap).collect(),
            biases: bias_grads.into_iter().map(Option::unwrap).collect(),
        })
    }

    /// Regularizer value: the norm-cap hinge summed over A2Q layers.
    pub fn reg_loss(&self) -> f64 {
        crate::a2q::regularization_penalty(self.layers.iter().filter_map(|l| match &l.weights {
            LayerWeights::A2q(a) => Some(a),
            LayerWeights::Baseline(_) => None,
        }))
    }

    /// Fraction of exactly-zero integer weight codes across the counted
    /// layers (all layers, or the non-pinned ones when io pinning is on and
    /// interior layers exist).
    pub fn sparsity(&self) -> f64 {
        let total_layers = self.layers.len();
        let counted: Vec<usize> = if self.config.pin_io_8bit && total_layers > 2 {
            (1..total_layers - 1).collect()
        } else {
            (0..total_layers).collect()
        };
        let mut zeros = 0usize;
        let mut total = 0usize;
        for l in counted {
            let codes = self.layers[l].forward_weights(ForwardMode::Quantized);
            let codes = codes.codes();
            zeros += codes.iter().filter(|&&c| c == 0).count();
            total += codes.len();
        }
        if total == 0 {
            0.0
        } else {
            zeros as f64 / total as f64
        }
    }

    /// Input bit width and signedness seen by each layer: the dataset's for
    /// the first, the hidden activation quantizer's for the rest.
    pub fn layer_input_types(&self) -> Vec<(u32, bool)> {
        let hidden_signed = self.config.activation == ActivationKind::IdentitySigned;
        (0..self.layers.len())
            .map(|l| {
                if l == 0 {
                    (self.input_bits, self.input_signed)
                } else {
                    (self.config.act_bits, hidden_signed)
                }
            })
            .collect()
    }

    /// Every A2Q channel of every layer passes the exact overflow-avoidance
    /// certificate at its target width.
    pub fn certificate_holds(&self) -> bool {
        self.layers.iter().all(|layer| match &layer.weights {
            LayerWeights::Baseline(_) => true,
            LayerWeights::A2q(a) => {
                let qw = a.quantize_weights();
                qw.codes.rows().into_iter().all(|row| {
                    crate::bounds::worst_case_fits(
                        row.as_slice().expect("row-major"),
                        a.input_bits(),
                        a.input_signed(),
                        a.acc_bits(),
                    )
                })
            }
        })
    }

    pub fn to_checkpoint(&self, train_config: &super::TrainConfig) -> Checkpoint {
        let layers = self
            .layers
            .iter()
            .map(|layer| match &layer.weights {
                LayerWeights::Baseline(b) => LayerState::Baseline {
                    weights: b.w.rows().into_iter().map(|r| r.to_vec()).collect(),
                    log2_scales: b.d.to_vec(),
                    bias: layer.bias.to_vec(),
                    weight_bits: b.weight_bits,
                },
                LayerWeights::A2q(a) => LayerState::A2q {
                    v: a.v.rows().into_iter().map(|r| r.to_vec()).collect(),
                    t: a.t.to_vec(),
                    d: a.d.to_vec(),
                    bias: layer.bias.to_vec(),
                    weight_bits: a.weight_bits(),
                    acc_bits: a.acc_bits(),
                    input_bits: a.input_bits(),
                    input_signed: a.input_signed(),
                },
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_config: self.config.clone(),
            train_config: train_config.clone(),
            input_bits: self.input_bits,
            input_signed: self.input_signed,
            layers,
            activation_running_max: self.act_quants.iter().map(|a| a.running_max).collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.model_config.validate()?;
        let mut layers = Vec::with_capacity(ck.layers.len());
        let mut num_classes = 0u32;
        for state in &ck.layers {
            let layer = match state {
                LayerState::Baseline {
                    weights,
                    log2_scales,
                    bias,
                    weight_bits,
                } => {
                    let w = rows_to_array(weights)?;
                    num_classes = w.nrows() as u32;
                    Layer {
                        weights: LayerWeights::Baseline(BaselineWeights {
                            w,
                            d: Array1::from_vec(log2_scales.clone()),
                            weight_bits: *weight_bits,
                        }),
                        bias: Array1::from_vec(bias.clone()),
                    }
                }
                LayerState::A2q {
                    v,
                    t,
                    d,
                    bias,
                    weight_bits,
                    acc_bits,
                    input_bits,
                    input_signed,
                } => {
                    let v = rows_to_array(v)?;
                    num_classes = v.nrows() as u32;
                    Layer {
                        weights: LayerWeights::A2q(A2qLayerParams::new(
                            v,
                            Array1::from_vec(t.clone()),
                            Array1::from_vec(d.clone()),
                            *weight_bits,
                            *acc_bits,
                            *input_bits,
                            *input_signed,
                        )?),
                        bias: Array1::from_vec(bias.clone()),
                    }
                }
            };
            layers.push(layer);
        }
        if layers.is_empty() {
            return Err(Error::CheckpointFormat("checkpoint has no layers".into()));
        }
        if ck.activation_running_max.len() + 1 != layers.len() {
            return Err(Error::CheckpointFormat(format!(
                "{} activation statistics for {} layers",
                ck.activation_running_max.len(),
                layers.len()
            )));
        }
        let act_quants = ck
            .activation_running_max
            .iter()
            .map(|&m| ActQuant {
                bits: ck.model_config.act_bits,
                signed: ck.model_config.activation == ActivationKind::IdentitySigned,
                running_max: m,
            })
            .collect();
        Ok(Model {
            config: ck.model_config.clone(),
            input_bits: ck.input_bits,
            input_signed: ck.input_signed,
            num_classes,
            layers,
            act_quants,
        })
    }

    /// Consistency checks between a model and the dataset it is applied to.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.feature_count() != self.layers[0].in_features() {
            return Err(Error::ShapeMismatch(format!(
                "dataset features {} vs model input {}",
                dataset.feature_count(),
                self.layers[0].in_features()
            )));
        }
        if dataset.range.bit_width() != self.input_bits
            || dataset.range.signed() != self.input_signed
        {
            return Err(Error::ShapeMismatch(format!(
                "dataset range {}-bit signed={} vs model input {}-bit signed={}",
                dataset.range.bit_width(),
                dataset.range.signed(),
                self.input_bits,
                self.input_signed
            )));
        }
        if dataset.num_classes != self.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "dataset classes {} vs model outputs {}",
                dataset.num_classes, self.num_classes
            )));
        }
        Ok(())
    }
}

fn rows_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::CheckpointFormat("empty weight matrix".into()));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::CheckpointFormat("ragged weight matrix".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat)
        .map_err(|e| Error::CheckpointFormat(e.to_string()))
}
