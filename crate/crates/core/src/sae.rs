//! Sparse autoencoder forward pass and loss.
//!
//! The encoder computes `f = ReLU(W_e (x - b_pre) + b_e)` and the decoder
//! reconstructs `x_hat = W_d f + b_dec`. The loss is the squared
//! reconstruction error plus an L1 penalty on `f` weighted by `lambda`.
//! Nothing here trains an SAE; the loss exists so that fixtures can be
//! checked against it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::input("ragged matrix rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols.max(1)).map(<[f64]>::to_vec).take(self.rows).collect()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `self * v`
    fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Encoder/decoder weights and biases of one SAE.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    /// `d_sae x d_model`
    pub enc_weights: Matrix,
    /// `d_model x d_sae`
    pub dec_weights: Matrix,
    pub pre_bias: Vec<f64>,
    pub enc_bias: Vec<f64>,
    pub dec_bias: Vec<f64>,
    pub sparsity_coeff: f64,
    pub d_model: usize,
    pub d_sae: usize,
}

impl SaeParams {
    /// All-zero parameters of the given shape.
    pub fn zeros(d_model: usize, d_sae: usize) -> Self {
        Self {
            enc_weights: Matrix::zeros(d_sae, d_model),
            dec_weights: Matrix::zeros(d_model, d_sae),
            pre_bias: vec![0.0; d_model],
            enc_bias: vec![0.0; d_sae],
            dec_bias: vec![0.0; d_model],
            sparsity_coeff: 0.0,
            d_model,
            d_sae,
        }
    }

    /// Checks the shape and sign invariants.
    pub fn validate(&self) -> Result<()> {
        let (dm, ds) = (self.d_model, self.d_sae);
        if dm == 0 || ds == 0 {
            return Err(Error::input("d_model and d_sae must be positive"));
        }
        if ds < dm {
            return Err(Error::input(format!("d_sae ({ds}) must be >= d_model ({dm})")));
        }
        if ds < 2 * dm {
            tracing::warn!(d_model = dm, d_sae = ds, "SAE is less than 2x overcomplete");
        }
        if self.enc_weights.rows() != ds || self.enc_weights.cols() != dm {
            return Err(Error::input(format!(
                "W_e is {}x{}, expected {ds}x{dm}",
                self.enc_weights.rows(),
                self.enc_weights.cols()
            )));
        }
        if self.dec_weights.rows() != dm || self.dec_weights.cols() != ds {
            return Err(Error::input(format!(
                "W_d is {}x{}, expected {dm}x{ds}",
                self.dec_weights.rows(),
                self.dec_weights.cols()
            )));
        }
        for (name, v, want) in [
            ("b_pre", &self.pre_bias, dm),
            ("b_e", &self.enc_bias, ds),
            ("b_dec", &self.dec_bias, dm),
        ] {
            if v.len() != want {
                return Err(Error::input(format!("{name} has length {}, expected {want}", v.len())));
            }
        }
        if !(self.sparsity_coeff >= 0.0) {
            return Err(Error::input("lambda must be >= 0"));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: SaeParamsFile = serde_json::from_str(s)?;
        file.try_into()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SaeParamsFile::from(self))?)
    }
}

/// On-disk layout: row-major nested arrays.
#[derive(Debug, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct SaeParamsFile {
    pub d_model: usize,
    pub d_sae: usize,
    pub lambda: f64,
    pub W_e: Vec<Vec<f64>>,
    pub W_d: Vec<Vec<f64>>,
    pub b_pre: Vec<f64>,
    pub b_e: Vec<f64>,
    pub b_dec: Vec<f64>,
}

impl TryFrom<SaeParamsFile> for SaeParams {
    type Error = Error;

    fn try_from(f: SaeParamsFile) -> Result<Self> {
        let params = SaeParams {
            enc_weights: Matrix::from_rows(&f.W_e)?,
            dec_weights: Matrix::from_rows(&f.W_d)?,
            pre_bias: f.b_pre,
            enc_bias: f.b_e,
            dec_bias: f.b_dec,
            sparsity_coeff: f.lambda,
            d_model: f.d_model,
            d_sae: f.d_sae,
        };
        params.validate()?;
        Ok(params)
    }
}

impl From<&SaeParams> for SaeParamsFile {
    fn from(p: &SaeParams) -> Self {
        SaeParamsFile {
            d_model: p.d_model,
            d_sae: p.d_sae,
            lambda: p.sparsity_coeff,
            W_e: p.enc_weights.to_rows(),
            W_d: p.dec_weights.to_rows(),
            b_pre: p.pre_bias.clone(),
            b_e: p.enc_bias.clone(),
            b_dec: p.dec_bias.clone(),
        }
    }
}

impl Serialize for SaeParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SaeParamsFile::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for SaeParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        SaeParamsFile::deserialize(d)?
            .try_into()
            .map_err(serde::de::Error::custom)
    }
}

pub fn encode(params: &SaeParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.d_model {
        return Err(Error::input(format!(
            "input has length {}, expected d_model = {}",
            x.len(),
            params.d_model
        )));
    }
    let centered: Vec<f64> = x.iter().zip(&params.pre_bias).map(|(a, b)| a - b).collect();
    Ok(params
        .enc_weights
        .mul_vec(&centered)
        .into_iter()
        .zip(&params.enc_bias)
        .map(|(z, b)| (z + b).max(0.0))
        .collect())
}

/// Pre-activation of a single latent, without the ReLU.
pub fn pre_activation(params: &SaeParams, x: &[f64], feature_index: usize) -> f64 {
    let row = params.enc_weights.row(feature_index);
    row.iter()
        .zip(x.iter().zip(&params.pre_bias))
        .map(|(w, (a, b))| w * (a - b))
        .sum::<f64>()
        + params.enc_bias[feature_index]
}

pub fn decode(params: &SaeParams, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != params.d_sae {
        return Err(Error::input(format!(
            "feature vector has length {}, expected d_sae = {}",
            f.len(),
            params.d_sae
        )));
    }
    if f.iter().any(|v| *v < 0.0) {
        return Err(Error::input("feature activations must be nonnegative"));
    }
    Ok(params
        .dec_weights
        .mul_vec(f)
        .into_iter()
        .zip(&params.dec_bias)
        .map(|(v, b)| v + b)
        .collect())
}

/// `||x - decode(encode(x))||^2 + lambda * ||encode(x)||_1`
pub fn sae_loss(params: &SaeParams, x: &[f64]) -> Result<f64> {
    let f = encode(params, x)?;
    let x_hat = decode(params, &f)?;
    let recon: f64 = x.iter().zip(&x_hat).map(|(a, b)| (a - b).powi(2)).sum();
    let l1: f64 = f.iter().map(|v| v.abs()).sum();
    Ok(recon + params.sparsity_coeff * l1)
}
