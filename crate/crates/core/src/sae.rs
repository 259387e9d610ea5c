//! Sparse autoencoders over the residual stream.
//!
//! Encoding is `f = σ(W_enc · x + b_enc)` per position where σ keeps a
//! pre-activation only when it exceeds the latent's threshold (0 for plain
//! rectification). Decoding is `x̂ = W_dec · f + b_dec`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::io::{read_f32_file, write_f32_file};
use crate::model::ActivationBatch;
use crate::rng;

pub const SAE_SIDECAR: &str = "sae.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    JumpRelu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseAutoencoder {
    /// `[d_sae × d_model]`.
    pub w_enc: Array2<f32>,
    pub b_enc: Array1<f32>,
    /// `[d_model × d_sae]`.
    pub w_dec: Array2<f32>,
    pub b_dec: Array1<f32>,
    pub activation: Activation,
    /// Per-latent firing threshold; all zero for [`Activation::Relu`].
    pub threshold: Array1<f32>,
    /// Subtract `b_dec` from the input before encoding.
    pub subtract_b_dec: bool,
    pub release: String,
    pub sae_id: String,
    pub layer: usize,
}

/// Latent activations, one row per position.
///
/// Freshly encoded batches are entrywise non-negative; once a steering
/// action writes a coefficient the batch is in post-steering state and may
/// hold negative values.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub values: Array2<f32>,
}

impl LatentBatch {
    pub fn new(values: Array2<f32>) -> Self {
        Self { values }
    }

    pub fn n_positions(&self) -> usize {
        self.values.nrows()
    }

    pub fn d_sae(&self) -> usize {
        self.values.ncols()
    }
}

impl SparseAutoencoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w_enc: Array2<f32>,
        b_enc: Array1<f32>,
        w_dec: Array2<f32>,
        b_dec: Array1<f32>,
        release: impl Into<String>,
        sae_id: impl Into<String>,
        layer: usize,
    ) -> Result<Self> {
        let d_sae = w_enc.nrows();
        let sae = Self {
            threshold: Array1::zeros(d_sae),
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            activation: Activation::Relu,
            subtract_b_dec: false,
            release: release.into(),
            sae_id: sae_id.into(),
            layer,
        };
        sae.validate()?;
        Ok(sae)
    }

    pub fn d_model(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn d_sae(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (d_sae, d_model) = self.w_enc.dim();
        let check = |name: &str, actual: &[usize], expected: &[usize]| {
            if actual != expected {
                Err(Error::shape(name, expected, actual))
            } else {
                Ok(())
            }
        };
        check("b_enc", self.b_enc.shape(), &[d_sae])?;
        check("W_dec", self.w_dec.shape(), &[d_model, d_sae])?;
        check("b_dec", self.b_dec.shape(), &[d_model])?;
        check("threshold", self.threshold.shape(), &[d_sae])?;
        if d_sae < d_model {
            return Err(Error::Config(format!(
                "SAE must be overcomplete: d_sae {d_sae} < d_model {d_model}"
            )));
        }
        if let Some(col) = self
            .w_dec
            .axis_iter(Axis(1))
            .position(|c| c.iter().all(|&v| v == 0.0))
        {
            return Err(Error::Config(format!("decoder column {col} is zero")));
        }
        let finite = [&self.w_enc, &self.w_dec]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
            && [&self.b_enc, &self.b_dec, &self.threshold]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::Config("SAE parameters contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn encode(&self, acts: &ActivationBatch) -> Result<LatentBatch> {
        self.encode_values(acts.values.view())
    }

    pub fn encode_values(&self, x: ArrayView2<'_, f32>) -> Result<LatentBatch> {
        if x.ncols() != self.d_model() {
            return Err(Error::shape("activations", &[x.nrows(), self.d_model()], x.shape()));
        }
        let mut pre = if self.subtract_b_dec {
            (&x - &self.b_dec).dot(&self.w_enc.t())
        } else {
            x.dot(&self.w_enc.t())
        };
        pre += &self.b_enc;
        for mut row in pre.rows_mut() {
            for (v, &t) in row.iter_mut().zip(self.threshold.iter()) {
                if !(*v > t) {
                    *v = 0.0;
                }
            }
        }
        Ok(LatentBatch { values: pre })
    }

    /// Reconstruction `[n_positions × d_model]`.
    pub fn decode(&self, latents: &LatentBatch) -> Result<Array2<f32>> {
        if latents.d_sae() != self.d_sae() {
            return Err(Error::shape(
                "latents",
                &[latents.n_positions(), self.d_sae()],
                latents.values.shape(),
            ));
        }
        Ok(latents.values.dot(&self.w_dec.t()) + &self.b_dec)
    }

    pub fn decoder_column(&self, latent: usize) -> Result<ndarray::ArrayView1<'_, f32>> {
        if latent >= self.d_sae() {
            return Err(Error::Range {
                what: "latent index",
                index: latent,
                limit: self.d_sae(),
            });
        }
        Ok(self.w_dec.column(latent))
    }
}

/// Builds an SAE whose planted latents fire on, and reconstruct exactly,
/// their directions.
///
/// Planted encoder rows are the rows of the pseudo-inverse of the planted
/// direction matrix, so `encode(c·d_i)` yields `c` at latent `i` and 0 at the
/// other planted latents. Remaining latents get small random encoder rows
/// (norm ≈ 0.01), bias −0.02 and random decoder columns of norm 0.1.
pub fn make_toy_sae(
    seed: u64,
    d_model: usize,
    d_sae: usize,
    planted: &[(usize, Vec<f32>)],
) -> Result<SparseAutoencoder> {
    if d_model == 0 || d_sae < d_model {
        return Err(Error::Argument(format!(
            "need 0 < d_model <= d_sae, got d_model {d_model}, d_sae {d_sae}"
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for (idx, dir) in planted {
        if *idx >= d_sae {
            return Err(Error::Range {
                what: "planted latent index",
                index: *idx,
                limit: d_sae,
            });
        }
        if !seen.insert(*idx) {
            return Err(Error::Argument(format!("duplicate planted latent index {idx}")));
        }
        if dir.len() != d_model {
            return Err(Error::shape(format!("planted direction {idx}"), &[d_model], &[dir.len()]));
        }
    }
    if planted.len() > d_model {
        return Err(Error::Argument(format!(
            "cannot plant {} independent directions in {d_model} dimensions",
            planted.len()
        )));
    }

    let mut rng = rng::seeded(seed);
    let mut w_enc = Array2::zeros((d_sae, d_model));
    let mut b_enc = Array1::zeros(d_sae);
    let mut w_dec = Array2::zeros((d_model, d_sae));
    for i in 0..d_sae {
        let enc = rng::unit_vector(&mut rng, d_model);
        let dec = rng::unit_vector(&mut rng, d_model);
        for k in 0..d_model {
            w_enc[[i, k]] = 0.01 * enc[k];
            w_dec[[k, i]] = 0.1 * dec[k];
        }
        b_enc[i] = -0.02;
    }

    if !planted.is_empty() {
        let m = planted.len();
        let dirs = DMatrix::<f64>::from_fn(d_model, m, |r, c| planted[c].1[r] as f64);
        let gram = dirs.transpose() * &dirs;
        let inv = gram.try_inverse().ok_or_else(|| {
            Error::Argument("planted directions are linearly dependent".into())
        })?;
        let pinv = inv * dirs.transpose();
        for (c, (idx, dir)) in planted.iter().enumerate() {
            for k in 0..d_model {
                w_enc[[*idx, k]] = pinv[(c, k)] as f32;
                w_dec[[k, *idx]] = dir[k];
            }
            b_enc[*idx] = 0.0;
        }
    }

    SparseAutoencoder::new(
        w_enc,
        b_enc,
        w_dec,
        Array1::zeros(d_model),
        "toy",
        format!("toy/seed_{seed}"),
        0,
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct SaeSidecar {
    release: String,
    sae_id: String,
    layer: usize,
    d_model: usize,
    d_sae: usize,
    activation: Activation,
    #[serde(default)]
    subtract_b_dec: bool,
    shapes: std::collections::BTreeMap<String, Vec<usize>>,
}

pub fn save_sae(sae: &SparseAutoencoder, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut shapes = std::collections::BTreeMap::new();
    let mut blocks: Vec<(&str, &[f32], Vec<usize>)> = vec![
        ("W_enc", sae.w_enc.as_slice().expect("standard layout"), sae.w_enc.shape().to_vec()),
        ("b_enc", sae.b_enc.as_slice().expect("standard layout"), sae.b_enc.shape().to_vec()),
        ("W_dec", sae.w_dec.as_slice().expect("standard layout"), sae.w_dec.shape().to_vec()),
        ("b_dec", sae.b_dec.as_slice().expect("standard layout"), sae.b_dec.shape().to_vec()),
    ];
    if sae.activation == Activation::JumpRelu {
        blocks.push((
            "threshold",
            sae.threshold.as_slice().expect("standard layout"),
            sae.threshold.shape().to_vec(),
        ));
    }
    for (name, data, shape) in blocks {
        write_f32_file(&dir.join(format!("{name}.bin")), data)?;
        shapes.insert(name.to_string(), shape);
    }
    let sidecar = SaeSidecar {
        release: sae.release.clone(),
        sae_id: sae.sae_id.clone(),
        layer: sae.layer,
        d_model: sae.d_model(),
        d_sae: sae.d_sae(),
        activation: sae.activation,
        subtract_b_dec: sae.subtract_b_dec,
        shapes,
    };
    let path = dir.join(SAE_SIDECAR);
    fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
}

/// Loads an SAE directory, naming the offending field on any failure.
pub fn load_sae(dir: impl AsRef<Path>) -> Result<SparseAutoencoder> {
    let dir = dir.as_ref();
    let path = dir.join(SAE_SIDECAR);
    let load_err = |field: &str, message: String| Error::Load {
        path: path.clone(),
        field: field.to_string(),
        message,
    };
    let text = fs::read_to_string(&path).map_err(|e| load_err(SAE_SIDECAR, e.to_string()))?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| load_err(SAE_SIDECAR, e.to_string()))?;
    for key in ["release", "sae_id", "layer", "d_model", "d_sae", "activation", "shapes"] {
        if raw.get(key).is_none() {
            return Err(load_err(key, "missing from sidecar".into()));
        }
    }
    let meta: SaeSidecar =
        serde_json::from_value(raw).map_err(|e| load_err(SAE_SIDECAR, e.to_string()))?;
    let (d_model, d_sae) = (meta.d_model, meta.d_sae);

    let mut expected: Vec<(&str, Vec<usize>)> = vec![
        ("W_enc", vec![d_sae, d_model]),
        ("b_enc", vec![d_sae]),
        ("W_dec", vec![d_model, d_sae]),
        ("b_dec", vec![d_model]),
    ];
    if meta.activation == Activation::JumpRelu {
        expected.push(("threshold", vec![d_sae]));
    }
    let mut data = std::collections::HashMap::new();
    for (name, shape) in &expected {
        let stored = meta
            .shapes
            .get(*name)
            .ok_or_else(|| load_err(name, "parameter block missing from sidecar shapes".into()))?;
        if stored != shape {
            return Err(Error::shape(*name, shape, stored));
        }
        let file = dir.join(format!("{name}.bin"));
        data.insert(*name, read_f32_file(&file, name, shape.iter().product())?);
    }
    let mut take = |name: &str| data.remove(name).expect("loaded above");
    let w_enc = Array2::from_shape_vec((d_sae, d_model), take("W_enc")).expect("length checked");
    let b_enc = Array1::from_vec(take("b_enc"));
    let w_dec = Array2::from_shape_vec((d_model, d_sae), take("W_dec")).expect("length checked");
    let b_dec = Array1::from_vec(take("b_dec"));
    let threshold = if meta.activation == Activation::JumpRelu {
        Array1::from_vec(take("threshold"))
    } else {
        Array1::zeros(d_sae)
    };
    let sae = SparseAutoencoder {
        w_enc,
        b_enc,
        w_dec,
        b_dec,
        activation: meta.activation,
        threshold,
        subtract_b_dec: meta.subtract_b_dec,
        release: meta.release,
        sae_id: meta.sae_id,
        layer: meta.layer,
    };
    sae.validate()?;
    Ok(sae)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn basis(d: usize, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    /// Loop-based `rectify(W_enc·x + b_enc)`.
    fn encode_oracle(sae: &SparseAutoencoder, x: &Array2<f32>) -> Array2<f32> {
        let mut out = Array2::zeros((x.nrows(), sae.d_sae()));
        for p in 0..x.nrows() {
            for i in 0..sae.d_sae() {
                let mut acc = sae.b_enc[i] as f64;
                for k in 0..sae.d_model() {
                    acc += sae.w_enc[[i, k]] as f64 * x[[p, k]] as f64;
                }
                out[[p, i]] = acc.max(0.0) as f32;
            }
        }
        out
    }

    #[test]
    fn zero_input_zero_latents() {
        let sae = make_toy_sae(1, 4, 8, &[(2, basis(4, 1))]).unwrap();
        let mut sae = sae;
        sae.b_enc.fill(0.0);
        let z = sae.encode_values(Array2::zeros((2, 4)).view()).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn planted_orthonormal_features_fire_alone() {
        let d = 6;
        let planted = vec![(3, basis(d, 0)), (5, basis(d, 2)), (0, basis(d, 4))];
        let sae = make_toy_sae(9, d, 16, &planted).unwrap();
        let x = Array2::from_shape_vec((1, d), basis(d, 2).iter().map(|v| v * 2.5).collect()).unwrap();
        let f = sae.encode_values(x.view()).unwrap();
        assert!((f.values[[0, 5]] - 2.5).abs() < 1e-5);
        assert!(f.values[[0, 3]].abs() < 1e-6);
        assert!(f.values[[0, 0]].abs() < 1e-6);
        let expect = encode_oracle(&sae, &x);
        for (a, b) in f.values.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn random_batch_matches_oracle() {
        let sae = make_toy_sae(4, 5, 12, &[(1, vec![0.3, -0.2, 0.5, 0.1, 0.0])]).unwrap();
        let mut r = rng::seeded(77);
        let x = Array2::from_shape_simple_fn((3, 5), || rng::symmetric_f32(&mut r, 3.0));
        let f = sae.encode_values(x.view()).unwrap();
        let expect = encode_oracle(&sae, &x);
        for (a, b) in f.values.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        assert!(f.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn decode_one_hot_is_scaled_column() {
        let sae = make_toy_sae(2, 4, 8, &[]).unwrap();
        let mut f = Array2::zeros((1, 8));
        f[[0, 6]] = 3.0;
        let x = sae.decode(&LatentBatch::new(f)).unwrap();
        for k in 0..4 {
            assert_eq!(x[[0, k]], 3.0 * sae.w_dec[[k, 6]] + sae.b_dec[k]);
        }
        let zero = sae.decode(&LatentBatch::new(Array2::zeros((2, 8)))).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn planted_round_trip_within_tolerance() {
        let d = 8;
        let mut r = rng::seeded(5);
        let planted: Vec<(usize, Vec<f32>)> = (0..4)
            .map(|i| (i * 3, rng::unit_vector(&mut r, d)))
            .collect();
        let sae = make_toy_sae(3, d, 24, &planted).unwrap();
        for (idx, dir) in &planted {
            let x = Array2::from_shape_vec((1, d), dir.clone()).unwrap();
            let f = sae.encode_values(x.view()).unwrap();
            let argmax = f.values.row(0).iter().enumerate().fold(0, |b, (i, &v)| {
                if v > f.values[[0, b]] { i } else { b }
            });
            assert_eq!(argmax, *idx);
            let back = sae.decode(&f).unwrap();
            let err = (&back - &x).mapv(|v| v * v).sum().sqrt();
            assert!(err <= 1e-3, "relative error {err}");
        }
    }

    #[test]
    fn duplicate_planted_index_rejected() {
        let err = make_toy_sae(0, 4, 8, &[(1, basis(4, 0)), (1, basis(4, 1))]).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn shape_errors() {
        let sae = make_toy_sae(0, 4, 8, &[]).unwrap();
        assert!(matches!(sae.encode_values(Array2::zeros((1, 3)).view()), Err(Error::Shape { .. })));
        assert!(matches!(sae.decode(&LatentBatch::new(Array2::zeros((1, 7)))), Err(Error::Shape { .. })));
        let bad = SparseAutoencoder::new(
            Array2::ones((4, 2)),
            Array1::zeros(4),
            array![[1.0, 1.0, 1.0, 0.0], [0.0, 1.0, 0.0, 0.0]],
            Array1::zeros(2),
            "r",
            "s",
            0,
        );
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let sae = make_toy_sae(8, 4, 8, &[(0, basis(4, 3))]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_sae(&sae, dir.path()).unwrap();
        assert_eq!(load_sae(dir.path()).unwrap(), sae);
    }

    #[test]
    fn missing_sae_id_is_load_error() {
        let sae = make_toy_sae(8, 4, 8, &[]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_sae(&sae, dir.path()).unwrap();
        let p = dir.path().join(SAE_SIDECAR);
        let mut v: Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("sae_id");
        fs::write(&p, v.to_string()).unwrap();
        let err = load_sae(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Load { ref field, .. } if field == "sae_id"), "{err}");
    }

    #[test]
    fn transposed_decoder_is_shape_error() {
        let sae = make_toy_sae(8, 4, 8, &[]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_sae(&sae, dir.path()).unwrap();
        let p = dir.path().join(SAE_SIDECAR);
        let mut v: Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        v["shapes"]["W_dec"] = serde_json::json!([8, 4]);
        fs::write(&p, v.to_string()).unwrap();
        let err = load_sae(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Shape { ref name, .. } if name == "W_dec"), "{err}");
    }

    #[test]
    fn jump_threshold_gates_small_values() {
        let mut sae = make_toy_sae(1, 4, 8, &[(0, basis(4, 0))]).unwrap();
        sae.activation = Activation::JumpRelu;
        sae.threshold[0] = 0.5;
        let f = sae.encode_values(array![[0.4, 0.0, 0.0, 0.0], [0.6, 0.0, 0.0, 0.0]].view()).unwrap();
        assert_eq!(f.values[[0, 0]], 0.0);
        assert!((f.values[[1, 0]] - 0.6).abs() < 1e-6);
    }
}
