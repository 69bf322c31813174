//! The named-parameter store, its initialization, the Adam optimizer,
//! and the binary checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;

use crate::fusion::init_fusion_matrices;
use crate::kgdata::MultiModalKG;
use crate::matrix::Matrix;
use crate::tensor::{Tape, Tensor};

use super::config::TrainConfig;
use super::PipelineError;

/// RRGAT depth is fixed; layer outputs are concatenated and projected.
pub const RRGAT_LAYERS: usize = 2;

/// All learnable parameters as an ordered list of named matrices.
/// The order is the initialization order and the checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub entries: Vec<(String, Matrix)>,
}

impl ModelParams {
    /// Fresh parameters sized for a graph pair; uniform init scaled by
    /// fan-in, relation vectors normalized to unit rows.
    pub fn init(
        kg1: &MultiModalKG,
        kg2: &MultiModalKG,
        config: &TrainConfig,
        rng: &mut impl Rng,
    ) -> ModelParams {
        let d = config.hidden_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut entries: Vec<(String, Matrix)> = Vec::new();
        let mut push = |name: &str, m: Matrix| entries.push((name.to_string(), m));

        // entity base embeddings start as a shared random projection of
        // the concatenated modality features, so entities with similar
        // features begin structurally close across the two graphs
        let feat_dim = kg1.rel_features.cols + kg1.attr_features.cols + kg1.visual_features.cols;
        let seed_proj = Matrix::uniform(
            feat_dim.max(1),
            d,
            -1.0 / (feat_dim.max(1) as f64).sqrt(),
            1.0 / (feat_dim.max(1) as f64).sqrt(),
            rng,
        );
        let concat_feats = |kg: &MultiModalKG| {
            let n = kg.entity_count;
            let mut f = Matrix::zeros(n, feat_dim);
            for r in 0..n {
                let row = f.row_mut(r);
                let (a, b) = (kg.rel_features.cols, kg.attr_features.cols);
                row[..a].copy_from_slice(kg.rel_features.row(r));
                row[a..a + b].copy_from_slice(kg.attr_features.row(r));
                row[a + b..].copy_from_slice(kg.visual_features.row(r));
            }
            f.matmul(&seed_proj).l2_normalize_rows()
        };
        for (name, kg) in [("g1.x_g", kg1), ("g2.x_g", kg2)] {
            let init = if feat_dim == 0 {
                Matrix::uniform(kg.entity_count, d, -bound, bound, rng)
            } else {
                concat_feats(kg)
            };
            push(name, init);
        }
        push(
            "g1.rel_vecs",
            Matrix::uniform(kg1.relation_count, d, -1.0, 1.0, rng).l2_normalize_rows(),
        );
        push(
            "g2.rel_vecs",
            Matrix::uniform(kg2.relation_count, d, -1.0, 1.0, rng).l2_normalize_rows(),
        );
        push("rrgat.omega", Matrix::uniform(1, 2 * d, -bound, bound, rng));
        push(
            "rrgat.w_out",
            Matrix::uniform(
                RRGAT_LAYERS * d,
                d,
                -1.0 / ((RRGAT_LAYERS * d) as f64).sqrt(),
                1.0 / ((RRGAT_LAYERS * d) as f64).sqrt(),
                rng,
            ),
        );
        for (name, dim) in [
            ("rel", kg1.rel_features.cols),
            ("attr", kg1.attr_features.cols),
            ("vis", kg1.visual_features.cols),
        ] {
            let b = if dim == 0 { bound } else { 1.0 / (dim as f64).sqrt() };
            push(&format!("proj.{name}.w"), Matrix::uniform(dim, d, -b, b, rng));
            push(&format!("proj.{name}.b"), Matrix::zeros(1, d));
        }
        entries.extend(init_fusion_matrices(d, config.fusion.heads, config.fusion.ffn_dim, rng));
        ModelParams { entries }
    }

    pub fn get(&self, name: &str) -> &Matrix {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        &mut self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    /// Register every parameter on a tape; the returned map feeds the
    /// forward pass.
    pub fn register(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(n, m)| (n.clone(), tape.param(m.clone())))
            .collect()
    }

    /// Checkpoint image: little-endian u32 parameter count, then per
    /// parameter u32 name length, UTF-8 name, u32 rows, u32 cols, and
    /// the row-major f64 payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.write_u32::<LittleEndian>(self.entries.len() as u32).unwrap();
        for (name, m) in &self.entries {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u32::<LittleEndian>(m.rows as u32).unwrap();
            out.write_u32::<LittleEndian>(m.cols as u32).unwrap();
            for &v in &m.data {
                out.write_f64::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams, PipelineError> {
        let mut r = bytes;
        let bad = |msg: &str| PipelineError::Checkpoint(msg.to_string());
        let count = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated name length"))?;
            let mut name = vec![0u8; name_len as usize];
            r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
            let rows = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated shape"))? as usize;
            let cols = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated shape"))? as usize;
            let mut data = vec![0.0; rows * cols];
            for v in data.iter_mut() {
                *v = r.read_f64::<LittleEndian>().map_err(|_| bad("truncated payload"))?;
            }
            entries.push((name, Matrix::from_vec(rows, cols, data)));
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after last parameter"));
        }
        Ok(ModelParams { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let mut f = std::fs::File::create(path).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        f.write_all(&self.to_bytes()).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelParams, PipelineError> {
        let bytes = std::fs::read(path).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        ModelParams::from_bytes(&bytes)
    }
}

/// Adam with the standard constants; state is kept per parameter in
/// entry order.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Adam {
        let zeros: Vec<Matrix> = params
            .entries
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows, m.cols))
            .collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; `grads` aligns with `params.entries`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Matrix]) {
        assert_eq!(grads.len(), params.entries.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, p)) in params.entries.iter_mut().enumerate() {
            let g = &grads[i];
            assert!(g.rows == p.rows && g.cols == p.cols, "gradient shape mismatch");
            for j in 0..p.data.len() {
                let gj = g.data[j];
                self.m[i].data[j] = self.beta1 * self.m[i].data[j] + (1.0 - self.beta1) * gj;
                self.v[i].data[j] = self.beta2 * self.v[i].data[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = self.m[i].data[j] / bc1;
                let v_hat = self.v[i].data[j] / bc2;
                p.data[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
