use serde::{Deserialize, Serialize};

use crate::core::{ImageTensor, RngState};
use crate::model::conv::{
    conv3x3_backward_input, conv3x3_backward_weights, conv3x3_forward, ConvShape,
};
use crate::model::{NoisePredictor, TimeEmbedding, Trace};
use crate::{Error, Result};

/// Architecture of the reference network.
///
/// The spatial size is not part of the configuration: 3×3 convolutions are
/// shape-agnostic, so one model serves any H×W. `t_steps` is the chain
/// length the time embedding normalizes against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub hidden_width: usize,
    pub depth: usize,
    pub t_steps: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden_width == 0 || self.t_steps == 0 {
            return Err(Error::invalid("model channels, width, and t_steps must be positive"));
        }
        if self.depth < 2 {
            return Err(Error::invalid("model depth must be at least 2 (input and output convolutions)"));
        }
        Ok(())
    }

    /// Channel counts `(c_in, c_out)` of each convolution layer.
    fn layer_channels(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let c_in = if l == 0 { self.channels } else { self.hidden_width };
                let c_out = if l == self.depth - 1 { self.channels } else { self.hidden_width };
                (c_in, c_out)
            })
            .collect()
    }

    /// Closed-form parameter count: each layer holds c_out·(9·c_in + 1)
    /// values (3×3 kernels plus one bias per output channel).
    pub fn param_count(&self) -> usize {
        self.layer_channels().iter().map(|&(ci, co)| co * (9 * ci + 1)).sum()
    }
}

/// Offsets of one layer's weights and biases in the flat parameter vector.
#[derive(Clone, Copy, Debug)]
struct LayerSpan {
    w_off: usize,
    w_len: usize,
    b_off: usize,
    b_len: usize,
    c_in: usize,
}

/// A small convolutional residual noise predictor.
///
/// Structure: 3×3 convolution into `hidden_width` channels, plus a fixed
/// sinusoidal time embedding added per hidden channel, tanh; `depth - 2`
/// hidden 3×3 convolutions with tanh; a final 3×3 convolution back to the
/// input channel count, plus a residual skip from the network input to the
/// output. tanh keeps the loss smooth so finite-difference gradient checks
/// converge at tight tolerances.
///
/// Parameters are stored as `f32` (the checkpoint format) with a shadow
/// `f64` copy used for all arithmetic.
pub struct RefNet {
    cfg: ModelConfig,
    spans: Vec<LayerSpan>,
    params: Vec<f32>,
    params_f64: Vec<f64>,
    embed: TimeEmbedding,
}

/// Builds a reference network with freshly initialized parameters.
///
/// Weights and biases are uniform in [-k, k] with k = sqrt(1/fan_in),
/// fan_in = 9·c_in; the final layer is scaled by one tenth so an untrained
/// network predicts near-zero noise and early reverse steps stay tame.
pub fn reference_net(cfg: &ModelConfig, rng: &mut RngState) -> Result<RefNet> {
    cfg.validate()?;
    let spans = build_spans(cfg);
    let count = cfg.param_count();
    let mut params = vec![0.0f32; count];
    for (l, span) in spans.iter().enumerate() {
        let k = (1.0 / (9.0 * span.c_in as f64)).sqrt();
        let scale = if l == cfg.depth - 1 { 0.1 } else { 1.0 };
        for i in 0..span.w_len {
            params[span.w_off + i] = (scale * rng.uniform_f64(-k, k)) as f32;
        }
        for i in 0..span.b_len {
            params[span.b_off + i] = (scale * rng.uniform_f64(-k, k)) as f32;
        }
    }
    let params_f64 = params.iter().map(|&p| f64::from(p)).collect();
    Ok(RefNet { cfg: *cfg, spans, params, params_f64, embed: TimeEmbedding::new(cfg.hidden_width) })
}

impl RefNet {
    /// Rebuilds a network from a checkpointed parameter vector.
    pub fn from_params(cfg: &ModelConfig, params: &[f32]) -> Result<RefNet> {
        cfg.validate()?;
        if params.len() != cfg.param_count() {
            return Err(Error::invalid(format!(
                "parameter count {} does not match architecture ({} expected)",
                params.len(),
                cfg.param_count()
            )));
        }
        let spans = build_spans(cfg);
        Ok(RefNet {
            cfg: *cfg,
            spans,
            params: params.to_vec(),
            params_f64: params.iter().map(|&p| f64::from(p)).collect(),
            embed: TimeEmbedding::new(cfg.hidden_width),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// One-line architecture summary with the parameter count.
    pub fn describe(&self) -> String {
        format!(
            "conv net: {} layers, hidden width {}, {} channels, {} parameters",
            self.cfg.depth,
            self.cfg.hidden_width,
            self.cfg.channels,
            self.param_count()
        )
    }

    fn check_input(&self, x: &ImageTensor, t: usize) -> Result<()> {
        if x.channels() != self.cfg.channels {
            return Err(Error::invalid(format!(
                "input has {} channels, model expects {}",
                x.channels(),
                self.cfg.channels
            )));
        }
        if t == 0 || t > self.cfg.t_steps {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.cfg.t_steps
            )));
        }
        Ok(())
    }

    fn weights(&self, l: usize) -> &[f64] {
        let s = &self.spans[l];
        &self.params_f64[s.w_off..s.w_off + s.w_len]
    }

    fn biases(&self, l: usize) -> &[f64] {
        let s = &self.spans[l];
        &self.params_f64[s.b_off..s.b_off + s.b_len]
    }
}

fn build_spans(cfg: &ModelConfig) -> Vec<LayerSpan> {
    let mut spans = Vec::with_capacity(cfg.depth);
    let mut off = 0;
    for (c_in, c_out) in cfg.layer_channels() {
        let w_len = c_out * c_in * 9;
        let span = LayerSpan { w_off: off, w_len, b_off: off + w_len, b_len: c_out, c_in };
        off += w_len + c_out;
        spans.push(span);
    }
    spans
}

impl NoisePredictor for RefNet {
    fn forward_traced(&self, x: &ImageTensor, t: usize) -> Result<(Vec<f64>, Trace)> {
        self.check_input(x, t)?;
        let (_, h, w) = x.shape();
        let x64 = x.to_f64();
        let depth = self.cfg.depth;
        let width = self.cfg.hidden_width;
        let emb = self.embed.embed(t, self.cfg.t_steps);

        // Hidden post-activations, layer by layer; these feed backward().
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(depth - 1);

        let shape_in =
            ConvShape { c_in: self.cfg.channels, c_out: width, height: h, width: w };
        let mut act = vec![0.0; shape_in.output_len()];
        conv3x3_forward(&x64, self.weights(0), self.biases(0), &shape_in, &mut act);
        for c in 0..width {
            let plane = &mut act[c * h * w..(c + 1) * h * w];
            let e = emb[c];
            for v in plane.iter_mut() {
                *v = (*v + e).tanh();
            }
        }
        hidden.push(act);

        let shape_mid = ConvShape { c_in: width, c_out: width, height: h, width: w };
        for l in 1..depth - 1 {
            let mut next = vec![0.0; shape_mid.output_len()];
            conv3x3_forward(
                hidden.last().expect("previous activation"),
                self.weights(l),
                self.biases(l),
                &shape_mid,
                &mut next,
            );
            for v in next.iter_mut() {
                *v = v.tanh();
            }
            hidden.push(next);
        }

        let shape_out =
            ConvShape { c_in: width, c_out: self.cfg.channels, height: h, width: w };
        let mut out = vec![0.0; shape_out.output_len()];
        conv3x3_forward(
            hidden.last().expect("last hidden activation"),
            self.weights(depth - 1),
            self.biases(depth - 1),
            &shape_out,
            &mut out,
        );
        for (o, &xv) in out.iter_mut().zip(&x64) {
            *o += xv;
        }
        Ok((out, Trace::new(hidden)))
    }

    fn backward(
        &self,
        x: &ImageTensor,
        t: usize,
        trace: &Trace,
        upstream: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_input(x, t)?;
        if upstream.len() != x.len() {
            return Err(Error::invalid(format!(
                "upstream gradient length {} does not match input length {}",
                upstream.len(),
                x.len()
            )));
        }
        let hidden = trace.buffers();
        if hidden.len() != self.cfg.depth - 1 {
            return Err(Error::invalid("trace does not match model depth"));
        }

        let (_, h, w) = x.shape();
        let depth = self.cfg.depth;
        let width = self.cfg.hidden_width;
        let mut dtheta = vec![0.0f64; self.param_count()];

        // Output layer: d_out is the upstream gradient (the input skip adds
        // nothing to parameter gradients).
        let shape_out =
            ConvShape { c_in: width, c_out: self.cfg.channels, height: h, width: w };
        let last = &hidden[depth - 2];
        {
            let s = &self.spans[depth - 1];
            let (dw, db) = split_span(&mut dtheta, s);
            conv3x3_backward_weights(last, upstream, &shape_out, dw, db);
        }
        let mut d_hidden = vec![0.0; last.len()];
        conv3x3_backward_input(upstream, self.weights(depth - 1), &shape_out, &mut d_hidden);

        // Hidden layers in reverse: peel tanh, then the convolution.
        let shape_mid = ConvShape { c_in: width, c_out: width, height: h, width: w };
        for l in (1..depth - 1).rev() {
            let post = &hidden[l];
            let mut d_pre = d_hidden;
            for (g, &a) in d_pre.iter_mut().zip(post) {
                *g *= 1.0 - a * a;
            }
            {
                let s = &self.spans[l];
                let (dw, db) = split_span(&mut dtheta, s);
                conv3x3_backward_weights(&hidden[l - 1], &d_pre, &shape_mid, dw, db);
            }
            d_hidden = vec![0.0; hidden[l - 1].len()];
            conv3x3_backward_input(&d_pre, self.weights(l), &shape_mid, &mut d_hidden);
        }

        // Input layer: the time embedding is an additive constant, so it
        // only shifts the pre-activation, never the parameter gradients.
        let shape_in =
            ConvShape { c_in: self.cfg.channels, c_out: width, height: h, width: w };
        let post = &hidden[0];
        let mut d_pre = d_hidden;
        for (g, &a) in d_pre.iter_mut().zip(post) {
            *g *= 1.0 - a * a;
        }
        let x64 = x.to_f64();
        {
            let s = &self.spans[0];
            let (dw, db) = split_span(&mut dtheta, s);
            conv3x3_backward_weights(&x64, &d_pre, &shape_in, dw, db);
        }
        Ok(dtheta)
    }

    fn params(&self) -> &[f32] {
        &self.params
    }

    fn set_params(&mut self, params: &[f32]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "parameter count {} does not match model ({} expected)",
                params.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(params);
        for (dst, &src) in self.params_f64.iter_mut().zip(params) {
            *dst = f64::from(src);
        }
        Ok(())
    }
}

/// Splits a flat gradient buffer into one layer's (weights, biases) views.
fn split_span<'a>(dtheta: &'a mut [f64], span: &LayerSpan) -> (&'a mut [f64], &'a mut [f64]) {
    let (_, rest) = dtheta.split_at_mut(span.w_off);
    let (dw, rest) = rest.split_at_mut(span.w_len);
    let db = &mut rest[..span.b_len];
    (dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig { channels: 1, hidden_width: 6, depth: 4, t_steps: 50 }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { channels: 0, hidden_width: 4, depth: 4, t_steps: 10 }
            .validate()
            .is_err());
        assert!(ModelConfig { channels: 1, hidden_width: 4, depth: 1, t_steps: 10 }
            .validate()
            .is_err());
        assert!(small_cfg().validate().is_ok());
    }

    #[test]
    fn param_count_matches_layer_arithmetic() {
        // depth 4, width 32, 1 channel: 32·(9+1) + 2·32·(9·32+1) + 1·(9·32+1).
        let cfg = ModelConfig { channels: 1, hidden_width: 32, depth: 4, t_steps: 100 };
        let want = 32 * 10 + 2 * (32 * (9 * 32 + 1)) + (9 * 32 + 1);
        assert_eq!(cfg.param_count(), want);

        let mut rng = RngState::from_seed(1);
        let net = reference_net(&cfg, &mut rng).unwrap();
        assert_eq!(net.param_count(), want);
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = RngState::from_seed(2);
        let cfg = ModelConfig { channels: 1, hidden_width: 32, depth: 4, t_steps: 100 };
        let net = reference_net(&cfg, &mut rng).unwrap();
        let x = crate::core::gaussian_like((1, 28, 28), &mut rng).unwrap();
        let out = net.forward(&x, 7).unwrap();
        assert_eq!(out.len(), x.len());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = RngState::from_seed(3);
        let net = reference_net(&small_cfg(), &mut rng).unwrap();
        let x = crate::core::gaussian_like((1, 12, 12), &mut rng).unwrap();
        let a = net.forward(&x, 5).unwrap();
        let b = net.forward(&x, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn timestep_changes_output() {
        let mut rng = RngState::from_seed(4);
        let net = reference_net(&small_cfg(), &mut rng).unwrap();
        let x = crate::core::gaussian_like((1, 8, 8), &mut rng).unwrap();
        let a = net.forward(&x, 1).unwrap();
        let b = net.forward(&x, 50).unwrap();
        assert_ne!(a, b, "time embedding must influence the output");
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = RngState::from_seed(5);
        let net = reference_net(&small_cfg(), &mut rng).unwrap();
        let x = crate::core::gaussian_like((2, 8, 8), &mut rng).unwrap();
        assert!(net.forward(&x, 5).is_err(), "wrong channel count");
        let x1 = crate::core::gaussian_like((1, 8, 8), &mut rng).unwrap();
        assert!(net.forward(&x1, 0).is_err(), "t = 0");
        assert!(net.forward(&x1, 51).is_err(), "t beyond chain length");
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = RngState::from_seed(6);
        let net = reference_net(&small_cfg(), &mut rng).unwrap();
        let x = crate::core::gaussian_like((1, 8, 8), &mut rng).unwrap();
        let (_, trace) = net.forward_traced(&x, 3).unwrap();
        let grad = net.backward(&x, 3, &trace, &vec![0.0; x.len()]).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let mut rng = RngState::from_seed(7);
        let net = reference_net(&small_cfg(), &mut rng).unwrap();
        let x = crate::core::gaussian_like((1, 8, 8), &mut rng).unwrap();
        let (_, trace) = net.forward_traced(&x, 3).unwrap();

        let g1: Vec<f64> = (0..x.len()).map(|_| rng.standard_normal()).collect();
        let g2: Vec<f64> = (0..x.len()).map(|_| rng.standard_normal()).collect();
        let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();

        let d1 = net.backward(&x, 3, &trace, &g1).unwrap();
        let d2 = net.backward(&x, 3, &trace, &g2).unwrap();
        let dsum = net.backward(&x, 3, &trace, &sum).unwrap();
        for j in 0..d1.len() {
            assert!((dsum[j] - (d1[j] + d2[j])).abs() < 1e-6, "parameter {j}");
        }
    }

    #[test]
    fn params_roundtrip_reproduces_forward() {
        let mut rng = RngState::from_seed(8);
        let net = reference_net(&small_cfg(), &mut rng).unwrap();
        let x = crate::core::gaussian_like((1, 10, 10), &mut rng).unwrap();
        let want = net.forward(&x, 9).unwrap();

        let rebuilt = RefNet::from_params(net.config(), net.params()).unwrap();
        let got = rebuilt.forward(&x, 9).unwrap();
        assert_eq!(want, got, "forward must be bit-identical after reload");
    }

    #[test]
    fn final_layer_initialized_small() {
        let mut rng = RngState::from_seed(9);
        let cfg = small_cfg();
        let net = reference_net(&cfg, &mut rng).unwrap();
        let spans = build_spans(&cfg);
        let last = &spans[cfg.depth - 1];
        let k = (1.0 / (9.0 * last.c_in as f64)).sqrt();
        for i in 0..last.w_len {
            let v = f64::from(net.params()[last.w_off + i]).abs();
            assert!(v <= 0.1 * k + 1e-9, "final layer weight {i} too large: {v}");
        }
    }
}
