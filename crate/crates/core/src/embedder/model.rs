use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::losses::{total_loss, Batch, ConfusionConfig, MsLossConfig};
use crate::rng::substream;
use crate::{Error, Result};

pub const PARAMS_FORMAT: &str = "exclusion-search-params/v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Mlp1,
}

/// Dense affine layer `y = W x + b`, weights row-major `rows x cols`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let d = Self {
            rows,
            cols,
            weights,
            bias,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut d = Self::zeros(n, n);
        (0..n).for_each(|i| d.weights[i * n + i] = 1.0);
        d
    }

    fn validate(&self) -> Result<()> {
        if self.weights.len() != self.rows * self.cols {
            return Err(Error::Dimension {
                expected: self.rows * self.cols,
                got: self.weights.len(),
            });
        }
        if self.bias.len() != self.rows {
            return Err(Error::Dimension {
                expected: self.rows,
                got: self.bias.len(),
            });
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameters"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                let row = &self.weights[r * self.cols..(r + 1) * self.cols];
                self.bias[r] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// `W^T dy`
    fn backward_input(&self, dy: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.cols];
        for (r, g) in dy.iter().enumerate() {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            dx.iter_mut().zip(row).for_each(|(d, w)| *d += g * w);
        }
        dx
    }

    /// Accumulates `dy x^T` and `dy` as this layer's gradient.
    fn accumulate(&mut self, dy: &[f64], x: &[f64]) {
        for (r, g) in dy.iter().enumerate() {
            self.bias[r] += g;
            let row = &mut self.weights[r * self.cols..(r + 1) * self.cols];
            row.iter_mut().zip(x).for_each(|(w, v)| *w += g * v);
        }
    }
}

/// Shape of a freshly initialised embedder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Hidden width, `mlp1` only.
    pub d_hidden: usize,
    pub d_out: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Linear,
            d_hidden: 64,
            d_out: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderParams {
    architecture: Architecture,
    d_in: usize,
    d_hidden: Option<usize>,
    d_out: usize,
    /// Feature layer first (mlp1 only), embedding layer last.
    layers: Vec<Dense>,
}

impl EmbedderParams {
    pub fn linear(layer: Dense) -> Result<Self> {
        layer.validate()?;
        Ok(Self {
            architecture: Architecture::Linear,
            d_in: layer.cols,
            d_hidden: None,
            d_out: layer.rows,
            layers: vec![layer],
        })
    }

    pub fn mlp1(hidden: Dense, out: Dense) -> Result<Self> {
        hidden.validate()?;
        out.validate()?;
        if out.cols != hidden.rows {
            return Err(Error::Dimension {
                expected: hidden.rows,
                got: out.cols,
            });
        }
        Ok(Self {
            architecture: Architecture::Mlp1,
            d_in: hidden.cols,
            d_hidden: Some(hidden.rows),
            d_out: out.rows,
            layers: vec![hidden, out],
        })
    }

    /// Gaussian initialisation with variance `1 / fan_in` (`2 / fan_in`
    /// ahead of a ReLU), zero biases.
    pub fn init(cfg: &ModelConfig, d_in: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || cfg.d_out == 0 || (cfg.architecture == Architecture::Mlp1 && cfg.d_hidden == 0) {
            return Err(Error::InvalidConfig("layer widths must be >= 1".into()));
        }
        let mut rng = substream(seed, "init");
        let mut layer = |rows: usize, cols: usize, gain: f64| {
            let sd = (gain / cols as f64).sqrt();
            let weights = (0..rows * cols)
                .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Dense {
                rows,
                cols,
                weights,
                bias: vec![0.0; rows],
            }
        };
        match cfg.architecture {
            Architecture::Linear => Self::linear(layer(cfg.d_out, d_in, 1.0)),
            Architecture::Mlp1 => {
                let h = layer(cfg.d_hidden, d_in, 2.0);
                let o = layer(cfg.d_out, cfg.d_hidden, 1.0);
                Self::mlp1(h, o)
            }
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub(crate) fn zero_grads(&self) -> Vec<Dense> {
        self.layers.iter().map(|l| Dense::zeros(l.rows, l.cols)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.layers.iter().try_for_each(Dense::validate)?;
        let expected = match self.architecture {
            Architecture::Linear => 1,
            Architecture::Mlp1 => 2,
        };
        if self.layers.len() != expected
            || self.layers[0].cols != self.d_in
            || self.layers[self.layers.len() - 1].rows != self.d_out
            || (expected == 2 && self.layers[1].cols != self.layers[0].rows)
        {
            return Err(Error::InvalidConfig("inconsistent layer shapes".into()));
        }
        Ok(())
    }
}

/// Intermediate values kept for backpropagation.
pub(crate) struct Forward {
    hidden_pre: Option<Vec<f64>>,
    hidden: Option<Vec<f64>>,
    norm: f64,
    pub(crate) unit: Vec<f64>,
}

pub(crate) fn forward(params: &EmbedderParams, x: &[f64]) -> Result<Forward> {
    if x.len() != params.d_in {
        return Err(Error::Dimension {
            expected: params.d_in,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedder input"));
    }
    let (hidden_pre, hidden, y) = match params.architecture {
        Architecture::Linear => (None, None, params.layers[0].forward(x)),
        Architecture::Mlp1 => {
            let pre = params.layers[0].forward(x);
            let h: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            let y = params.layers[1].forward(&h);
            (Some(pre), Some(h), y)
        }
    };
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("embedder output"));
    }
    if norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let unit = y.into_iter().map(|v| v / norm).collect();
    Ok(Forward {
        hidden_pre,
        hidden,
        norm,
        unit,
    })
}

/// Backpropagates `g = dL/d(unit embedding)` through the normalization and
/// the layers, accumulating into `grads`.
pub(crate) fn backward(params: &EmbedderParams, x: &[f64], fw: &Forward, g: &[f64], grads: &mut [Dense]) {
    let f = &fw.unit;
    let proj: f64 = f.iter().zip(g).map(|(a, b)| a * b).sum();
    let dy: Vec<f64> = g.iter().zip(f).map(|(gi, fi)| (gi - proj * fi) / fw.norm).collect();
    match params.architecture {
        Architecture::Linear => grads[0].accumulate(&dy, x),
        Architecture::Mlp1 => {
            let h = fw.hidden.as_ref().expect("mlp1 forward keeps hidden");
            let pre = fw.hidden_pre.as_ref().expect("mlp1 forward keeps pre-activation");
            grads[1].accumulate(&dy, h);
            let dh = params.layers[1].backward_input(&dy);
            let dpre: Vec<f64> = dh
                .iter()
                .zip(pre)
                .map(|(d, p)| if *p > 0.0 { *d } else { 0.0 })
                .collect();
            grads[0].accumulate(&dpre, x);
        }
    }
}

/// Forward pass followed by L2 normalization.
pub fn embed(params: &EmbedderParams, features: &[f64]) -> Result<Vec<f64>> {
    Ok(forward(params, features)?.unit)
}

pub fn embed_all<'a, I>(params: &EmbedderParams, features: I) -> Result<Vec<Vec<f64>>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    features.into_iter().map(|x| embed(params, x)).collect()
}

/// Loss components of one batch under the combined objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub ms: f64,
    pub confusion: f64,
    pub total: f64,
}

/// Total loss of a batch of raw inputs and its gradient with respect to
/// every parameter, including the normalization Jacobian.
pub fn batch_objective(
    params: &EmbedderParams,
    inputs: &[&[f64]],
    labels: &[u64],
    tags: &[Option<String>],
    ms_cfg: &MsLossConfig,
    conf_cfg: &ConfusionConfig,
) -> Result<(ObjectiveValue, Vec<Dense>)> {
    let passes: Vec<Forward> = inputs.iter().map(|x| forward(params, x)).collect::<Result<_>>()?;
    let batch = Batch::new_unchecked(
        passes.iter().map(|p| p.unit.clone()).collect(),
        labels.to_vec(),
        tags.to_vec(),
    )?;
    let loss = total_loss(&batch, ms_cfg, conf_cfg)?;
    let mut grads = params.zero_grads();
    for ((x, fw), g) in inputs.iter().zip(&passes).zip(&loss.grad) {
        backward(params, x, fw, g, &mut grads);
    }
    Ok((
        ObjectiveValue {
            ms: loss.ms,
            confusion: loss.confusion,
            total: loss.total,
        },
        grads,
    ))
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    format: String,
    #[serde(flatten)]
    params: EmbedderParams,
}

pub fn write_params<W: Write>(params: &EmbedderParams, mut w: W) -> Result<()> {
    let file = ParamsFile {
        format: PARAMS_FORMAT.to_string(),
        params: params.clone(),
    };
    serde_json::to_writer(&mut w, &file)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_params<R: Read>(r: R) -> Result<EmbedderParams> {
    let file: ParamsFile = serde_json::from_reader(r)?;
    if file.format != PARAMS_FORMAT {
        return Err(Error::InvalidConfig(format!(
            "unsupported params format `{}`",
            file.format
        )));
    }
    file.params.validate()?;
    Ok(file.params)
}

pub fn save_params(params: &EmbedderParams, path: impl AsRef<Path>) -> Result<()> {
    write_params(params, BufWriter::new(File::create(path)?))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<EmbedderParams> {
    read_params(BufReader::new(File::open(path)?))
}
