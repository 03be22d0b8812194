use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dense, Encoder, EncoderCache, EncoderConfig, Gradients, ParamSet};
use crate::{Error, Result};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Layout of one raw local state row: the flattened `3×P` correlation matrix
/// (similarities, kinds, frequencies) followed by the `H`-dim request
/// embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub query_width: usize,
    pub input_dim: usize,
}

impl StateLayout {
    pub fn correlation_len(&self) -> usize {
        3 * self.query_width
    }

    pub fn state_len(&self) -> usize {
        self.correlation_len() + self.input_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub layout: StateLayout,
    /// `None` feeds the raw request embedding to the trunk.
    pub encoder: Option<EncoderConfig>,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layout.query_width == 0 || self.layout.input_dim == 0 {
            return Err(Error::config("state layout dimensions must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden width must be at least 1"));
        }
        if let Some(enc) = &self.encoder {
            enc.validate()?;
            if enc.input_dim != self.layout.input_dim {
                return Err(Error::config(format!(
                    "encoder input_dim {} differs from embedding dim {}",
                    enc.input_dim, self.layout.input_dim
                )));
            }
        }
        Ok(())
    }

    /// Length of the per-agent feature vector seen by the trunk.
    pub fn feature_dim(&self) -> usize {
        self.layout.correlation_len()
            + self
                .encoder
                .as_ref()
                .map_or(self.layout.input_dim, |e| e.output_dim)
    }
}

/// Turns raw local states into trunk features: similarities are fed as
/// `-ln(1 - c + SIMILARITY_EPS)` (0 for empty slots, stretched near 1),
/// frequencies as `ln(1 + f)`, and the request goes through the encoder when
/// one is configured.
/// Keeps the similarity feature finite for exact matches.
pub const SIMILARITY_EPS: f64 = 1e-3;

#[derive(Clone, Debug)]
struct Features {
    layout: StateLayout,
    encoder: Option<Encoder>,
}

impl Features {
    fn new<R: Rng + ?Sized>(
        cfg: &NetConfig,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = match cfg.encoder {
            Some(enc) => Some(Encoder::new(enc, params, &format!("{prefix}.enc"), rng)?),
            None => None,
        };
        Ok(Features {
            layout: cfg.layout,
            encoder,
        })
    }

    fn forward(
        &self,
        params: &ParamSet,
        x: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Option<EncoderCache>)> {
        crate::linalg::check_dim(self.layout.state_len(), x.ncols())?;
        let p = self.layout.query_width;
        let cl = self.layout.correlation_len();
        let mut corr = x.slice(s![.., ..cl]).to_owned();
        corr.slice_mut(s![.., ..p])
            .mapv_inplace(|c| -(1.0 - c + SIMILARITY_EPS).ln());
        corr.slice_mut(s![.., 2 * p..]).mapv_inplace(f64::ln_1p);
        let request = x.slice(s![.., cl..]);
        let (embedded, cache) = match &self.encoder {
            Some(enc) => {
                let (out, cache) = enc.forward(params, request)?;
                (out, Some(cache))
            }
            None => (request.to_owned(), None),
        };
        let features = concatenate(Axis(1), &[corr.view(), embedded.view()]).expect("row counts");
        Ok((features, cache))
    }

    fn backward(
        &self,
        params: &ParamSet,
        cache: Option<&EncoderCache>,
        dfeatures: ArrayView2<f64>,
        grads: &mut Gradients,
    ) {
        if let (Some(enc), Some(cache)) = (&self.encoder, cache) {
            let cl = self.layout.correlation_len();
            enc.backward(params, cache, dfeatures.slice(s![.., cl..]), grads);
        }
    }
}

/// Dense tanh trunk with a linear output layer.
#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<Dense>,
}

#[derive(Clone, Debug)]
struct MlpCache {
    /// Input to each layer; entry `i > 0` is the tanh output of layer `i-1`.
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        inputs: usize,
        hidden: usize,
        hidden_layers: usize,
        outputs: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut width = inputs;
        for i in 0..hidden_layers {
            layers.push(Dense::new(
                params,
                &format!("{prefix}.fc{i}"),
                width,
                hidden,
                1.0,
                rng,
            ));
            width = hidden;
        }
        layers.push(Dense::new(
            params,
            &format!("{prefix}.out"),
            width,
            outputs,
            out_gain,
            rng,
        ));
        Mlp { layers }
    }

    fn forward(&self, params: &ParamSet, x: Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(params, h.view());
            if i < last {
                y.mapv_inplace(f64::tanh);
            }
            inputs.push(h);
            h = y;
        }
        (h, MlpCache { inputs })
    }

    fn backward(
        &self,
        params: &ParamSet,
        cache: &MlpCache,
        dout: Array2<f64>,
        grads: &mut Gradients,
    ) -> Array2<f64> {
        let mut dy = dout;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            let mut dx = layer.backward(params, x.view(), dy.view(), grads);
            if i > 0 {
                // x is a tanh output
                ndarray::Zip::from(&mut dx)
                    .and(x)
                    .for_each(|d, &a| *d *= 1.0 - a * a);
            }
            dy = dx;
        }
        dy
    }
}

/// Shared actor: two logits over {cache path, direct cloud}.
#[derive(Clone, Debug)]
pub struct PolicyNet {
    cfg: NetConfig,
    features: Features,
    trunk: Mlp,
}

#[derive(Clone, Debug)]
pub struct PolicyCache {
    encoder: Option<EncoderCache>,
    trunk: MlpCache,
}

impl PolicyCache {
    pub fn encoder(&self) -> Option<&EncoderCache> {
        self.encoder.as_ref()
    }
}

#[derive(Clone, Debug)]
pub struct PolicyOutput {
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    pub cache: PolicyCache,
}

impl PolicyNet {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<(Self, ParamSet)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let net = Self::build(cfg, &mut params, &mut rng)?;
        Ok((net, params))
    }

    pub fn build<R: Rng + ?Sized>(
        cfg: NetConfig,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let features = Features::new(&cfg, params, "policy", rng)?;
        let trunk = Mlp::new(
            params,
            "policy",
            cfg.feature_dim(),
            cfg.hidden,
            cfg.hidden_layers,
            2,
            0.01,
            rng,
        );
        Ok(PolicyNet {
            cfg,
            features,
            trunk,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Index of the output layer's weight tensor.
    pub fn output_layer(&self) -> Dense {
        *self.trunk.layers.last().expect("trunk has an output layer")
    }

    /// Batched forward over raw local states (`B × state_len`).
    pub fn forward(&self, params: &ParamSet, states: ArrayView2<f64>) -> Result<PolicyOutput> {
        let (features, encoder) = self.features.forward(params, states)?;
        let (logits, trunk) = self.trunk.forward(params, features);
        let probs = softmax_rows(&logits);
        Ok(PolicyOutput {
            logits,
            probs,
            cache: PolicyCache { encoder, trunk },
        })
    }

    /// Action probabilities for one raw local state.
    pub fn probabilities(&self, params: &ParamSet, state: &[f64]) -> Result<[f64; 2]> {
        let x = ArrayView2::from_shape((1, state.len()), state)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let out = self.forward(params, x)?;
        Ok([out.probs[[0, 0]], out.probs[[0, 1]]])
    }

    /// Backpropagates `dL/d logits` into a fresh gradient set.
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &PolicyCache,
        dlogits: Array2<f64>,
    ) -> Gradients {
        let mut grads = params.zero_grads();
        let dfeat = self
            .trunk
            .backward(params, &cache.trunk, dlogits, &mut grads);
        self.features
            .backward(params, cache.encoder.as_ref(), dfeat.view(), &mut grads);
        grads
    }
}

/// Central critic over the concatenated local states of all agents.
#[derive(Clone, Debug)]
pub struct ValueNet {
    cfg: NetConfig,
    agents: usize,
    features: Features,
    trunk: Mlp,
}

#[derive(Clone, Debug)]
pub struct ValueCache {
    encoder: Option<EncoderCache>,
    trunk: MlpCache,
    batch: usize,
}

impl ValueNet {
    pub fn new(cfg: NetConfig, agents: usize, seed: u64) -> Result<(Self, ParamSet)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let net = Self::build(cfg, agents, &mut params, &mut rng)?;
        Ok((net, params))
    }

    pub fn build<R: Rng + ?Sized>(
        cfg: NetConfig,
        agents: usize,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if agents == 0 {
            return Err(Error::config("value network needs at least one agent"));
        }
        let features = Features::new(&cfg, params, "value", rng)?;
        let trunk = Mlp::new(
            params,
            "value",
            agents * cfg.feature_dim(),
            cfg.hidden,
            cfg.hidden_layers,
            1,
            1.0,
            rng,
        );
        Ok(ValueNet {
            cfg,
            agents,
            features,
            trunk,
        })
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn global_len(&self) -> usize {
        self.agents * self.cfg.layout.state_len()
    }

    /// Batched forward over global states (`B × N·state_len`, agents in
    /// server order).
    pub fn forward(
        &self,
        params: &ParamSet,
        global: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, ValueCache)> {
        crate::linalg::check_dim(self.global_len(), global.ncols())?;
        let batch = global.nrows();
        let local = Array2::from_shape_vec(
            (batch * self.agents, self.cfg.layout.state_len()),
            global.iter().copied().collect(),
        )
        .expect("global reshape");
        let (features, encoder) = self.features.forward(params, local.view())?;
        let joined = Array2::from_shape_vec(
            (batch, self.agents * self.cfg.feature_dim()),
            features.iter().copied().collect(),
        )
        .expect("feature reshape");
        let (out, trunk) = self.trunk.forward(params, joined);
        Ok((
            out.column(0).to_owned(),
            ValueCache {
                encoder,
                trunk,
                batch,
            },
        ))
    }

    pub fn value(&self, params: &ParamSet, global: &[f64]) -> Result<f64> {
        let x = ArrayView2::from_shape((1, global.len()), global)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(self.forward(params, x)?.0[0])
    }

    /// Backpropagates `dL/d value` (length `B`).
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &ValueCache,
        dvalues: &Array1<f64>,
    ) -> Gradients {
        let mut grads = params.zero_grads();
        let dout = dvalues.clone().insert_axis(Axis(1));
        let djoined = self.trunk.backward(params, &cache.trunk, dout, &mut grads);
        let dfeat = Array2::from_shape_vec(
            (cache.batch * self.agents, self.cfg.feature_dim()),
            djoined.iter().copied().collect(),
        )
        .expect("feature reshape");
        self.features
            .backward(params, cache.encoder.as_ref(), dfeat.view(), &mut grads);
        grads
    }
}
