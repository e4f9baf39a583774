//! Residual adapter model over frozen embeddings.
//!
//! Image path: `u = norm(x + A x)`, then for the main or pseudo branch
//! `u' = norm(u + W u)`. Text path: `t_c = norm(w_c + B w_c)`, then during
//! training `t'_c = norm(t_c + W_t t_c)`. Logits are `gamma * <u', t'_c>`.
//! The trunk maps `A` and `B` persist at inference; the three adapters do not.
//! All maps start at zero, so the untrained model reproduces zero-shot logits.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Main,
    Pseudo,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModel {
    pub gamma: f64,
    pub trunk_img: Array2<f64>,
    pub trunk_txt: Array2<f64>,
    pub main: Array2<f64>,
    pub pseudo: Array2<f64>,
    pub text: Array2<f64>,
}

/// Gradients, one matrix per weight, same layout as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub trunk_img: Array2<f64>,
    pub trunk_txt: Array2<f64>,
    pub main: Array2<f64>,
    pub pseudo: Array2<f64>,
    pub text: Array2<f64>,
}

impl ModelGrads {
    pub fn zeros(dim: usize) -> Self {
        let z = || Array2::zeros((dim, dim));
        Self {
            trunk_img: z(),
            trunk_txt: z(),
            main: z(),
            pseudo: z(),
            text: z(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.matrices_mut() {
            m.mapv_inplace(|v| v * s);
        }
    }

    pub fn add(&mut self, other: &ModelGrads) {
        for (a, b) in self.matrices_mut().into_iter().zip(other.matrices()) {
            *a += b;
        }
    }

    pub fn matrices(&self) -> [&Array2<f64>; 5] {
        [&self.trunk_img, &self.trunk_txt, &self.main, &self.pseudo, &self.text]
    }

    pub fn matrices_mut(&mut self) -> [&mut Array2<f64>; 5] {
        [
            &mut self.trunk_img,
            &mut self.trunk_txt,
            &mut self.main,
            &mut self.pseudo,
            &mut self.text,
        ]
    }
}

pub const WEIGHT_NAMES: [&str; 5] = ["trunk_img", "trunk_txt", "main", "pseudo", "text"];

/// Intermediate values of one image forward pass.
#[derive(Debug, Clone)]
pub struct ImageActivation {
    x: Array1<f64>,
    a_norm: f64,
    u: Array1<f64>,
    b_norm: f64,
    pub out: Array1<f64>,
    branch: Branch,
}

/// Encoded class texts plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct TextActivation {
    w: Array2<f64>,
    g_norm: Vec<f64>,
    t: Array2<f64>,
    h_norm: Vec<f64>,
    pub out: Array2<f64>,
    training: bool,
}

fn residual_norm(w: &Array2<f64>, x: ArrayView1<f64>) -> (Array1<f64>, f64) {
    let y = &x + &w.dot(&x);
    let n = y.dot(&y).sqrt();
    (y / n, n)
}

/// Backward through `y = v / |v|`: `(dy - y (y . dy)) / |v|`.
fn norm_backward(y: &Array1<f64>, dy: &Array1<f64>, n: f64) -> Array1<f64> {
    let proj = y.dot(dy);
    (dy - &(y * proj)) / n
}

fn add_outer(acc: &mut Array2<f64>, a: &Array1<f64>, b: ArrayView1<f64>) {
    Zip::indexed(acc).for_each(|(i, j), v| *v += a[i] * b[j]);
}

impl AdapterModel {
    pub fn zeros(dim: usize, gamma: f64) -> Self {
        let z = || Array2::zeros((dim, dim));
        Self {
            gamma,
            trunk_img: z(),
            trunk_txt: z(),
            main: z(),
            pseudo: z(),
            text: z(),
        }
    }

    pub fn dim(&self) -> usize {
        self.trunk_img.nrows()
    }

    pub fn matrices(&self) -> [&Array2<f64>; 5] {
        [&self.trunk_img, &self.trunk_txt, &self.main, &self.pseudo, &self.text]
    }

    pub fn matrices_mut(&mut self) -> [&mut Array2<f64>; 5] {
        [
            &mut self.trunk_img,
            &mut self.trunk_txt,
            &mut self.main,
            &mut self.pseudo,
            &mut self.text,
        ]
    }

    pub fn encode_texts(&self, base: &Array2<f64>, training: bool) -> TextActivation {
        let (c, d) = base.dim();
        let mut t = Array2::zeros((c, d));
        let mut out = Array2::zeros((c, d));
        let mut g_norm = Vec::with_capacity(c);
        let mut h_norm = Vec::with_capacity(c);
        for k in 0..c {
            let (tk, gn) = residual_norm(&self.trunk_txt, base.row(k));
            g_norm.push(gn);
            if training {
                let (hk, hn) = residual_norm(&self.text, tk.view());
                h_norm.push(hn);
                out.row_mut(k).assign(&hk);
            } else {
                out.row_mut(k).assign(&tk);
            }
            t.row_mut(k).assign(&tk);
        }
        TextActivation {
            w: base.clone(),
            g_norm,
            t,
            h_norm,
            out,
            training,
        }
    }

    pub fn encode_image(&self, x: ArrayView1<f64>, branch: Branch) -> ImageActivation {
        let (u, a_norm) = residual_norm(&self.trunk_img, x);
        let (out, b_norm) = match branch {
            Branch::Main => residual_norm(&self.main, u.view()),
            Branch::Pseudo => residual_norm(&self.pseudo, u.view()),
            Branch::Inference => (u.clone(), 1.0),
        };
        ImageActivation {
            x: x.to_owned(),
            a_norm,
            u,
            b_norm,
            out,
            branch,
        }
    }

    pub fn logits(&self, img: &ImageActivation, text: &TextActivation) -> Array1<f64> {
        text.out.dot(&img.out) * self.gamma
    }

    /// Logits for one feature vector. Training branches use the text adapter.
    pub fn forward_logits(&self, x: ArrayView1<f64>, base_text: &Array2<f64>, branch: Branch) -> Array1<f64> {
        let text = self.encode_texts(base_text, branch != Branch::Inference);
        self.logits(&self.encode_image(x, branch), &text)
    }

    /// Backpropagates `dlogits` through the image path into `grads` and
    /// accumulates the gradient with respect to the text outputs.
    pub fn backward_image(
        &self,
        img: &ImageActivation,
        text: &TextActivation,
        dlogits: &Array1<f64>,
        dtext_out: &mut Array2<f64>,
        grads: &mut ModelGrads,
    ) {
        let dout = text.out.t().dot(dlogits) * self.gamma;
        add_outer(dtext_out, &(dlogits * self.gamma), img.out.view());
        let du = match img.branch {
            Branch::Inference => dout,
            Branch::Main | Branch::Pseudo => {
                let (w, gw) = if img.branch == Branch::Main {
                    (&self.main, &mut grads.main)
                } else {
                    (&self.pseudo, &mut grads.pseudo)
                };
                let db = norm_backward(&img.out, &dout, img.b_norm);
                add_outer(gw, &db, img.u.view());
                &db + &w.t().dot(&db)
            }
        };
        let da = norm_backward(&img.u, &du, img.a_norm);
        add_outer(&mut grads.trunk_img, &da, img.x.view());
    }

    pub fn backward_text(&self, text: &TextActivation, dtext_out: &Array2<f64>, grads: &mut ModelGrads) {
        for k in 0..text.out.nrows() {
            let dy = dtext_out.row(k).to_owned();
            let tk = text.t.row(k).to_owned();
            let dt = if text.training {
                let dh = norm_backward(&text.out.row(k).to_owned(), &dy, text.h_norm[k]);
                add_outer(&mut grads.text, &dh, tk.view());
                &dh + &self.text.t().dot(&dh)
            } else {
                dy
            };
            let dg = norm_backward(&tk, &dt, text.g_norm[k]);
            add_outer(&mut grads.trunk_txt, &dg, text.w.row(k));
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    dim: usize,
    gamma: f64,
    files: Vec<(String, String)>,
}

/// Writes `checkpoint.json` plus one f32 binary per weight matrix.
pub fn save_checkpoint(model: &AdapterModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (name, m) in WEIGHT_NAMES.iter().zip(model.matrices()) {
        let file = format!("{name}.f32");
        let bytes: Vec<u8> = m.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        files.push((name.to_string(), file));
    }
    let manifest = CheckpointManifest {
        version: 1,
        dim: model.dim(),
        gamma: model.gamma,
        files,
    };
    let path = dir.join("checkpoint.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializes"))
        .map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<AdapterModel> {
    let dir = dir.as_ref();
    let path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|source| Error::Json { path, source })?;
    let d = manifest.dim;
    let mut model = AdapterModel::zeros(d, manifest.gamma);
    for (name, m) in WEIGHT_NAMES.iter().zip(model.matrices_mut()) {
        let file = manifest
            .files
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, f)| f.clone())
            .ok_or_else(|| Error::Manifest(format!("checkpoint lacks {name}")))?;
        let path = dir.join(&file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != d * d * 4 {
            return Err(Error::ByteLengthMismatch {
                file,
                expected: d * d * 4,
                actual: bytes.len(),
            });
        }
        for (v, b) in m.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
    }
    Ok(model)
}
