//! JSON checkpoints with base64 little-endian `f64` arrays, plus run
//! manifests.
//!
//! Loading rebuilds each model through its constructor, overwrites the
//! parameters, and verifies the stored checksum; a model checkpoint also
//! records the checksum of the backbone it was trained against.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterNet, CompositeAdapter, Form};
use crate::autodiff::{ParamSet, Tensor};
use crate::calibrators::{Calibration, ConformalCalibrator, ConformalConfig, QuantileCalibrator, QuantileConfig};
use crate::error::{Error, Result};
use crate::forecaster::{BackboneKind, FitConfig, Forecaster, Shapes};
use crate::selector::{MaskNet, PredLoss, SelectorConfig, SelectorLossWeights};
use crate::training::{SelectorModel, Trainable};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Base64 of the little-endian `f64` bytes.
    pub data: String,
}

pub fn encode_array(name: &str, t: &Tensor) -> ArrayRecord {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    ArrayRecord { name: name.to_string(), shape: t.shape().to_vec(), data: STANDARD.encode(bytes) }
}

pub fn decode_array(r: &ArrayRecord) -> Result<Tensor> {
    let bytes = STANDARD.decode(&r.data).map_err(|e| Error::Checkpoint(format!("array `{}`: {e}", r.name)))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("array `{}` has a truncated payload", r.name)));
    }
    let data: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Tensor::new(data, r.shape.clone()).map_err(|e| Error::Checkpoint(format!("array `{}`: {e}", r.name)))
}

fn find<'a>(arrays: &'a [ArrayRecord], name: &str) -> Result<&'a ArrayRecord> {
    arrays.iter().find(|a| a.name == name).ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
}

fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("format_version {v}, expected {FORMAT_VERSION}")));
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneCheckpoint {
    pub format_version: u32,
    pub kind: BackboneKind,
    pub shapes: Shapes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_cols: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_config: Option<FitConfig>,
    pub arrays: Vec<ArrayRecord>,
    pub checksum: String,
}

impl BackboneCheckpoint {
    pub fn from_forecaster(f: &Forecaster) -> Result<Self> {
        if f.kind() == BackboneKind::Blackbox {
            return Err(Error::Unsupported("blackbox backbones cannot be checkpointed".into()));
        }
        let seasonal = f.seasonal_period();
        Ok(BackboneCheckpoint {
            format_version: FORMAT_VERSION,
            kind: f.kind(),
            shapes: f.shapes(),
            period: seasonal.map(|(p, _)| p),
            target_cols: seasonal.map(|(_, c)| c.to_vec()),
            fit_config: f.fit_config().cloned(),
            arrays: f.param_arrays().into_iter().map(|(n, t)| encode_array(n, t)).collect(),
            checksum: f.checksum(),
        })
    }

    pub fn to_forecaster(&self) -> Result<Forecaster> {
        check_version(self.format_version)?;
        let get = |n: &str| find(&self.arrays, n).and_then(decode_array);
        let s = self.shapes;
        let mut f = match self.kind {
            BackboneKind::LinearAr => Forecaster::linear(s, get("weight")?, get("bias")?)?,
            BackboneKind::SeasonalNaive => {
                let missing = || Error::Checkpoint("seasonal checkpoint lacks period or target_cols".into());
                Forecaster::seasonal_naive(
                    s,
                    self.period.ok_or_else(missing)?,
                    self.target_cols.clone().ok_or_else(missing)?,
                )?
            }
            BackboneKind::TinyMlp => Forecaster::tiny_mlp(s, get("w1")?, get("b1")?, get("w2")?, get("b2")?)?,
            BackboneKind::Blackbox => {
                return Err(Error::Unsupported("blackbox backbones cannot be restored".into()));
            }
        };
        if let Some(cfg) = &self.fit_config {
            f = f.with_fit_config(cfg.clone());
        }
        if f.checksum() != self.checksum {
            return Err(Error::Checkpoint("backbone checksum mismatch".into()));
        }
        Ok(f)
    }
}

pub fn save_backbone(path: &Path, f: &Forecaster) -> Result<BackboneCheckpoint> {
    let ck = BackboneCheckpoint::from_forecaster(f)?;
    write_json(path, &ck)?;
    Ok(ck)
}

pub fn load_backbone(path: &Path) -> Result<Forecaster> {
    read_json::<BackboneCheckpoint>(path)?.to_forecaster()
}

/// Any trainable model the toolkit can persist.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Adapter(AdapterNet),
    Composite(CompositeAdapter),
    Selector(SelectorModel),
    Quantile(QuantileCalibrator),
    Conformal(ConformalCalibrator),
}

impl Model {
    pub fn trainable(&self) -> &dyn Trainable {
        match self {
            Model::Adapter(m) => m,
            Model::Composite(m) => m,
            Model::Selector(m) => m,
            Model::Quantile(m) => m,
            Model::Conformal(m) => m,
        }
    }

    pub fn trainable_mut(&mut self) -> &mut dyn Trainable {
        match self {
            Model::Adapter(m) => m,
            Model::Composite(m) => m,
            Model::Selector(m) => m,
            Model::Quantile(m) => m,
            Model::Conformal(m) => m,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Model::Adapter(_) => "adapter",
            Model::Composite(_) => "composite",
            Model::Selector(_) => "selector",
            Model::Quantile(_) => "quantile",
            Model::Conformal(_) => "conformal",
        }
    }

    pub fn shapes(&self) -> Option<Shapes> {
        match self {
            Model::Adapter(m) => Some(m.shapes),
            Model::Composite(m) => Some(m.input.shapes),
            Model::Selector(_) => None,
            Model::Quantile(m) => Some(m.shapes),
            Model::Conformal(m) => Some(m.shapes),
        }
    }

    /// SHA-256 over every parameter group, in order.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for g in self.trainable().groups() {
            h.update(g.checksum().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Construction recipe; the parameters are restored on top of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelSpec {
    Adapter {
        config: AdapterConfig,
        shapes: Shapes,
    },
    Composite {
        input: AdapterConfig,
        output: AdapterConfig,
        shapes: Shapes,
        gated: bool,
    },
    Selector {
        config: SelectorConfig,
        lookback: usize,
        covariates: usize,
        tau: f64,
        weights: SelectorLossWeights,
        pred_loss: PredLoss,
    },
    Quantile {
        config: QuantileConfig,
        shapes: Shapes,
    },
    Conformal {
        config: ConformalConfig,
        shapes: Shapes,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        calibration: Option<Calibration>,
        #[serde(default)]
        scores: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub spec: ModelSpec,
    /// One list per parameter group.
    pub groups: Vec<Vec<ArrayRecord>>,
    pub backbone_checksum: String,
    pub checksum: String,
}

fn encode_group(p: &ParamSet) -> Vec<ArrayRecord> {
    p.iter().map(|(n, t)| encode_array(n, t)).collect()
}

fn restore_group(p: &mut ParamSet, arrays: &[ArrayRecord]) -> Result<()> {
    if arrays.len() != p.len() {
        return Err(Error::Checkpoint(format!("group holds {} arrays, model expects {}", arrays.len(), p.len())));
    }
    let names = p.names().to_vec();
    for (slot, name) in p.tensors_mut().iter_mut().zip(&names) {
        let t = decode_array(find(arrays, name)?)?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "array `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

impl ModelCheckpoint {
    pub fn new(model: &Model, backbone_checksum: &str) -> Self {
        let spec = match model {
            Model::Adapter(m) => ModelSpec::Adapter { config: m.config.clone(), shapes: m.shapes },
            Model::Composite(m) => ModelSpec::Composite {
                input: m.input.config.clone(),
                output: m.output.config.clone(),
                shapes: m.input.shapes,
                gated: m.gate.is_some(),
            },
            Model::Selector(m) => ModelSpec::Selector {
                config: m.mask.config.clone(),
                lookback: m.mask.lookback,
                covariates: m.mask.covariates,
                tau: m.mask.tau,
                weights: m.weights.clone(),
                pred_loss: m.pred_loss,
            },
            Model::Quantile(m) => ModelSpec::Quantile { config: m.config.clone(), shapes: m.shapes },
            Model::Conformal(m) => ModelSpec::Conformal {
                config: m.config.clone(),
                shapes: m.shapes,
                calibration: m.calibration.clone(),
                scores: m.scores.clone(),
            },
        };
        ModelCheckpoint {
            format_version: FORMAT_VERSION,
            spec,
            groups: model.trainable().groups().into_iter().map(encode_group).collect(),
            backbone_checksum: backbone_checksum.to_string(),
            checksum: model.checksum(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        check_version(self.format_version)?;
        let mut model = match &self.spec {
            ModelSpec::Adapter { config, shapes } => Model::Adapter(AdapterNet::new(config.clone(), *shapes, 0)?),
            ModelSpec::Composite { input, output, shapes, gated } => Model::Composite(CompositeAdapter::new(
                AdapterNet::new(input.clone(), *shapes, 0)?,
                AdapterNet::new(output.clone(), *shapes, 0)?,
                *gated,
            )?),
            ModelSpec::Selector { config, lookback, covariates, tau, weights, pred_loss } => {
                let mut mask = MaskNet::new(config.clone(), *lookback, *covariates, 0)?;
                mask.tau = *tau;
                Model::Selector(SelectorModel::new(mask, weights.clone(), *pred_loss)?)
            }
            ModelSpec::Quantile { config, shapes } => {
                Model::Quantile(QuantileCalibrator::new(config.clone(), *shapes, 0)?)
            }
            ModelSpec::Conformal { config, shapes, calibration, scores } => {
                let mut c = ConformalCalibrator::new(config.clone(), *shapes, 0)?;
                c.calibration = calibration.clone();
                c.scores = scores.clone();
                Model::Conformal(c)
            }
        };
        let groups = model.trainable_mut().groups_mut();
        if groups.len() != self.groups.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameter groups, model expects {}",
                self.groups.len(),
                groups.len()
            )));
        }
        for (g, arrays) in groups.into_iter().zip(&self.groups) {
            restore_group(g, arrays)?;
        }
        if model.checksum() != self.checksum {
            return Err(Error::Checkpoint("model checksum mismatch".into()));
        }
        Ok(model)
    }
}

pub fn save_model(path: &Path, model: &Model, backbone: &Forecaster) -> Result<ModelCheckpoint> {
    let ck = ModelCheckpoint::new(model, &backbone.checksum());
    write_json(path, &ck)?;
    Ok(ck)
}

/// Loads a model and checks it was trained against `backbone`.
pub fn load_model(path: &Path, backbone: &Forecaster) -> Result<Model> {
    let ck: ModelCheckpoint = read_json(path)?;
    if ck.backbone_checksum != backbone.checksum() {
        return Err(Error::Checkpoint(format!(
            "{} was trained against backbone {}, got {}",
            path.display(),
            ck.backbone_checksum,
            backbone.checksum()
        )));
    }
    ck.to_model()
}

/// Fully resolved config, seeds and checksums of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub checksums: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config,
            ..RunManifest::default()
        }
    }
}

/// Builds a two-adapter composite from one shared config.
pub fn composite_spec(cfg: &AdapterConfig, input_form: Form, shapes: Shapes, seed: u64, gated: bool) -> Result<Model> {
    Ok(Model::Composite(CompositeAdapter::from_config(cfg, input_form, shapes, seed, gated)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Placement;
    use crate::calibrators::DEFAULT_LEVELS;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shapes() -> Shapes {
        Shapes::new(4, 2, 3, 1)
    }

    fn perturb(model: &mut Model, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in model.trainable_mut().groups_mut() {
            for t in g.tensors_mut() {
                for v in t.data_mut() {
                    *v += rng.random_range(-0.5..0.5);
                }
            }
        }
    }

    #[test]
    fn array_round_trip_is_bit_exact() {
        let t = Tensor::new(vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -3.25, 7.0], vec![2, 3]).unwrap();
        let back = decode_array(&encode_array("t", &t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let mut bad = encode_array("t", &t);
        bad.data.pop();
        assert!(decode_array(&bad).is_err());
    }

    #[test]
    fn backbone_round_trip() {
        let s = shapes();
        let dir = tempfile::tempdir().unwrap();
        let w = Tensor::new((0..24).map(|i| f64::from(i) * 0.01).collect(), vec![3, 8]).unwrap();
        for f in [
            Forecaster::linear(s, w, Tensor::filled(&[3], 0.5)).unwrap(),
            Forecaster::seasonal_naive(s, 2, vec![1]).unwrap(),
        ] {
            let p = dir.path().join("f.json");
            save_backbone(&p, &f).unwrap();
            let g = load_backbone(&p).unwrap();
            assert_eq!(g.checksum(), f.checksum());
        }
        let bb = Forecaster::blackbox(s, None, |x| Ok(x.clone()));
        assert!(BackboneCheckpoint::from_forecaster(&bb).is_err());
    }

    #[test]
    fn tampered_backbone_is_rejected() {
        let f = Forecaster::linear(shapes(), Tensor::zeros(&[3, 8]), Tensor::zeros(&[3])).unwrap();
        let mut ck = BackboneCheckpoint::from_forecaster(&f).unwrap();
        ck.arrays[1] = encode_array("bias", &Tensor::filled(&[1, 3], 1.0));
        assert!(matches!(ck.to_forecaster(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn every_model_round_trips() {
        let s = shapes();
        let f = Forecaster::linear(s, Tensor::zeros(&[3, 8]), Tensor::zeros(&[3])).unwrap();
        let small = AdapterConfig { hidden_width: 4, ..AdapterConfig::new(Placement::Output, Form::Additive, 0.1) };
        let models = vec![
            Model::Adapter(AdapterNet::new(small.clone(), s, 1).unwrap()),
            composite_spec(&small, Form::Multiplicative, s, 2, true).unwrap(),
            Model::Selector(
                SelectorModel::new(
                    MaskNet::new(SelectorConfig::default(), 4, 2, 3).unwrap(),
                    SelectorLossWeights::with_budget(0.3),
                    PredLoss::Mse,
                )
                .unwrap(),
            ),
            Model::Quantile(
                QuantileCalibrator::new(
                    QuantileConfig { levels: DEFAULT_LEVELS.to_vec(), ..QuantileConfig::default() },
                    s,
                    4,
                )
                .unwrap(),
            ),
            Model::Conformal(ConformalCalibrator::new(ConformalConfig::default(), s, 5).unwrap()),
        ];
        let dir = tempfile::tempdir().unwrap();
        for (i, mut m) in models.into_iter().enumerate() {
            perturb(&mut m, i as u64);
            let p = dir.path().join(format!("{}.json", m.name()));
            save_model(&p, &m, &f).unwrap();
            let back = load_model(&p, &f).unwrap();
            assert_eq!(back, m, "{}", m.name());
            let other = Forecaster::linear(s, Tensor::zeros(&[3, 8]), Tensor::filled(&[3], 1.0)).unwrap();
            assert!(matches!(load_model(&p, &other), Err(Error::Checkpoint(_))));
        }
    }
}
