//! Versioned binary model container.
//!
//! Layout: magic `SPDN`, format version (u32 LE), tensor count (u32 LE),
//! then per tensor a length-prefixed UTF-8 name, rank (u32 LE), one u32 LE
//! per dimension, and the data as little-endian f64 in row-major order.
//! Architecture metadata rides along as `meta/...` tensors.

use super::layers::{BiMapLayer, DeepSetAlignLayer, FcLayer, RbnLayer, ReEigLayer};
use super::{SpdNetModel, EMBED_DIM};
use crate::error::{Error, Result};
use crate::signal::{DomainId, SubjectId};
use crate::spd::SpdMatrix;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;
use std::io::{Read, Write};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPDN";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Tensor {
    name: String,
    dims: Vec<u32>,
    data: Vec<f64>,
}

impl Tensor {
    fn matrix(name: impl Into<String>, m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Tensor {
            name: name.into(),
            dims: vec![m.nrows() as u32, m.ncols() as u32],
            data,
        }
    }

    fn vector(name: impl Into<String>, v: &DVector<f64>) -> Self {
        Tensor {
            name: name.into(),
            dims: vec![v.len() as u32],
            data: v.iter().copied().collect(),
        }
    }

    fn scalars(name: impl Into<String>, values: Vec<f64>) -> Self {
        Tensor {
            name: name.into(),
            dims: vec![values.len() as u32],
            data: values,
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.dims.len() != 2 {
            return Err(Error::BadCheckpoint(format!(
                "tensor {} has rank {}, expected 2",
                self.name,
                self.dims.len()
            )));
        }
        let (r, c) = (self.dims[0] as usize, self.dims[1] as usize);
        Ok(DMatrix::from_fn(r, c, |i, j| self.data[i * c + j]))
    }

    fn to_vector(&self) -> Result<DVector<f64>> {
        if self.dims.len() != 1 {
            return Err(Error::BadCheckpoint(format!(
                "tensor {} has rank {}, expected 1",
                self.name,
                self.dims.len()
            )));
        }
        Ok(DVector::from_vec(self.data.clone()))
    }
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_u32::<LittleEndian>(t.name.len() as u32)?;
    w.write_all(t.name.as_bytes())?;
    w.write_u32::<LittleEndian>(t.dims.len() as u32)?;
    let mut expected = 1usize;
    for &d in &t.dims {
        w.write_u32::<LittleEndian>(d)?;
        expected *= d as usize;
    }
    debug_assert_eq!(expected, t.data.len());
    for &x in &t.data {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let name_len = r.read_u32::<LittleEndian>()? as usize;
    if name_len > 4096 {
        return Err(Error::BadCheckpoint(format!(
            "tensor name length {name_len} is implausible"
        )));
    }
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::BadCheckpoint("tensor name is not UTF-8".into()))?;
    let rank = r.read_u32::<LittleEndian>()? as usize;
    if rank > 8 {
        return Err(Error::BadCheckpoint(format!("rank {rank} is implausible")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut len = 1usize;
    for _ in 0..rank {
        let d = r.read_u32::<LittleEndian>()?;
        dims.push(d);
        len = len.saturating_mul(d as usize);
    }
    if len > 100_000_000 {
        return Err(Error::BadCheckpoint(format!(
            "tensor {name} claims {len} elements"
        )));
    }
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    Ok(Tensor { name, dims, data })
}

/// Serializes the full model (parameters, running statistics, architecture).
pub fn save_checkpoint(model: &SpdNetModel, w: &mut impl Write) -> Result<()> {
    let mut tensors: Vec<Tensor> = Vec::new();
    let (d1, d2) = (model.bimap1.d_out(), model.bimap2.d_out());
    tensors.push(Tensor::scalars(
        "meta/arch",
        vec![
            model.input_dim as f64,
            d1 as f64,
            d2 as f64,
            model.fc1.w.nrows() as f64,
            model.fc2.w.nrows() as f64,
            model
                .deepset
                .as_ref()
                .map(|d| d.embed_dim() as f64)
                .unwrap_or(0.0),
        ],
    ));
    tensors.push(Tensor::scalars(
        "meta/hyper",
        vec![model.reeig1.eps, model.rbn1.momentum(), model.dropout],
    ));
    let domain_meta: Vec<f64> = model
        .heads
        .iter()
        .flat_map(|(d, h)| [d.0 as f64, h.w.nrows() as f64])
        .collect();
    tensors.push(Tensor {
        name: "meta/domains".into(),
        dims: vec![model.heads.len() as u32, 2],
        data: domain_meta,
    });

    for (s, f) in &model.fronts {
        tensors.push(Tensor::matrix(format!("front/{}/w", s.0), f.weight()));
    }
    tensors.push(Tensor::matrix("front/fallback/w", model.fallback_front.weight()));
    tensors.push(Tensor::matrix("trunk/bimap1/w", model.bimap1.weight()));
    tensors.push(Tensor::matrix("trunk/bimap2/w", model.bimap2.weight()));
    tensors.push(Tensor::matrix("trunk/rbn1/bias", model.rbn1.bias().matrix()));
    tensors.push(Tensor::matrix(
        "trunk/rbn1/running_mean",
        model.rbn1.running_mean().matrix(),
    ));
    tensors.push(Tensor::matrix("trunk/rbn2/bias", model.rbn2.bias().matrix()));
    tensors.push(Tensor::matrix(
        "trunk/rbn2/running_mean",
        model.rbn2.running_mean().matrix(),
    ));
    if let Some(ds) = &model.deepset {
        tensors.push(Tensor::matrix("deepset/gamma/w", &ds.gamma_w));
        tensors.push(Tensor::vector("deepset/gamma/b", &ds.gamma_b));
        tensors.push(Tensor::matrix("deepset/lambda/w", &ds.lambda_w));
        tensors.push(Tensor::vector("deepset/lambda/b", &ds.lambda_b));
    }
    for (s, e) in &model.embeddings {
        tensors.push(Tensor::vector(format!("embed/{}", s.0), e));
    }
    tensors.push(Tensor::vector("embed/fallback", &model.fallback_embedding));
    tensors.push(Tensor::matrix("fc1/w", &model.fc1.w));
    tensors.push(Tensor::vector("fc1/b", &model.fc1.b));
    tensors.push(Tensor::matrix("fc2/w", &model.fc2.w));
    tensors.push(Tensor::vector("fc2/b", &model.fc2.b));
    for (d, h) in &model.heads {
        tensors.push(Tensor::matrix(format!("head/{}/w", d.0), &h.w));
        tensors.push(Tensor::vector(format!("head/{}/b", d.0), &h.b));
    }

    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for t in &tensors {
        write_tensor(w, t)?;
    }
    Ok(())
}

/// Reads a checkpoint back into a model, re-validating every constrained
/// parameter (semi-orthogonal BiMaps, SPD batch-norm state).
pub fn load_checkpoint(r: &mut impl Read) -> Result<SpdNetModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadCheckpoint("wrong magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadCheckpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let t = read_tensor(r)?;
        tensors.insert(t.name.clone(), t);
    }
    let get = |name: &str| -> Result<&Tensor> {
        tensors
            .get(name)
            .ok_or_else(|| Error::BadCheckpoint(format!("missing tensor {name}")))
    };

    let arch = get("meta/arch")?;
    if arch.data.len() != 6 {
        return Err(Error::BadCheckpoint("meta/arch must hold 6 values".into()));
    }
    let input_dim = arch.data[0] as usize;
    let deepset_embed = arch.data[5] as usize;
    let hyper = get("meta/hyper")?;
    if hyper.data.len() != 3 {
        return Err(Error::BadCheckpoint("meta/hyper must hold 3 values".into()));
    }
    let (eps, momentum, dropout) = (hyper.data[0], hyper.data[1], hyper.data[2]);

    let mut fronts = BTreeMap::new();
    let mut embeddings = BTreeMap::new();
    for (name, t) in &tensors {
        if let Some(rest) = name.strip_prefix("front/") {
            if let Some(id) = rest.strip_suffix("/w") {
                if id != "fallback" {
                    let sid: u32 = id.parse().map_err(|_| {
                        Error::BadCheckpoint(format!("bad subject id in {name}"))
                    })?;
                    fronts.insert(SubjectId(sid), BiMapLayer::new(t.to_matrix()?)?);
                }
            }
        } else if let Some(id) = name.strip_prefix("embed/") {
            if id != "fallback" {
                let sid: u32 = id
                    .parse()
                    .map_err(|_| Error::BadCheckpoint(format!("bad subject id in {name}")))?;
                embeddings.insert(SubjectId(sid), t.to_vector()?);
            }
        }
    }
    if fronts.keys().collect::<Vec<_>>() != embeddings.keys().collect::<Vec<_>>() {
        return Err(Error::BadCheckpoint(
            "front-end and embedding subject sets differ".into(),
        ));
    }
    for e in embeddings.values() {
        if e.len() != EMBED_DIM {
            return Err(Error::BadCheckpoint(format!(
                "embedding length {} != {EMBED_DIM}",
                e.len()
            )));
        }
    }

    let mut rbn1 = RbnLayer::new(get("trunk/rbn1/bias")?.dims[0] as usize, momentum)?;
    rbn1.set_state(
        SpdMatrix::new(get("trunk/rbn1/bias")?.to_matrix()?)?,
        SpdMatrix::new(get("trunk/rbn1/running_mean")?.to_matrix()?)?,
    );
    let mut rbn2 = RbnLayer::new(get("trunk/rbn2/bias")?.dims[0] as usize, momentum)?;
    rbn2.set_state(
        SpdMatrix::new(get("trunk/rbn2/bias")?.to_matrix()?)?,
        SpdMatrix::new(get("trunk/rbn2/running_mean")?.to_matrix()?)?,
    );

    let deepset = if deepset_embed > 0 {
        Some(DeepSetAlignLayer {
            gamma_w: get("deepset/gamma/w")?.to_matrix()?,
            gamma_b: get("deepset/gamma/b")?.to_vector()?,
            lambda_w: get("deepset/lambda/w")?.to_matrix()?,
            lambda_b: get("deepset/lambda/b")?.to_vector()?,
        })
    } else {
        None
    };

    let domains_meta = get("meta/domains")?;
    let mut heads = BTreeMap::new();
    for row in domains_meta.data.chunks_exact(2) {
        let d = DomainId(row[0] as u32);
        heads.insert(
            d,
            FcLayer {
                w: get(&format!("head/{}/w", d.0))?.to_matrix()?,
                b: get(&format!("head/{}/b", d.0))?.to_vector()?,
            },
        );
    }
    if heads.is_empty() {
        return Err(Error::BadCheckpoint("checkpoint has no domain heads".into()));
    }

    let model = SpdNetModel {
        input_dim,
        fronts,
        fallback_front: BiMapLayer::new(get("front/fallback/w")?.to_matrix()?)?,
        bimap1: BiMapLayer::new(get("trunk/bimap1/w")?.to_matrix()?)?,
        rbn1,
        reeig1: ReEigLayer::new(eps)?,
        bimap2: BiMapLayer::new(get("trunk/bimap2/w")?.to_matrix()?)?,
        rbn2,
        reeig2: ReEigLayer::new(eps)?,
        deepset,
        embeddings,
        fallback_embedding: get("embed/fallback")?.to_vector()?,
        fc1: FcLayer {
            w: get("fc1/w")?.to_matrix()?,
            b: get("fc1/b")?.to_vector()?,
        },
        fc2: FcLayer {
            w: get("fc2/w")?.to_matrix()?,
            b: get("fc2/b")?.to_vector()?,
        },
        heads,
        dropout,
    };
    if model.fronts.is_empty() {
        return Err(Error::BadCheckpoint("checkpoint has no front-ends".into()));
    }
    Ok(model)
}
