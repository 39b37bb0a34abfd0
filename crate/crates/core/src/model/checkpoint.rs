//! Model checkpoints: a versioned binary blob of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "LATKCKPT" | version u32 | config block | last_lr f64 |
//! tensor count u32 | tensors: name_len u32, name utf8, ndim u32,
//!                    dims u32..., data f64...
//! ```
//!
//! Tensor names are `layer<i>.w` / `layer<i>.b`, `out.w` / `out.b`,
//! `lhuc.si.<i>`, and `lhuc.sd.<speaker>.<i>`. Speakers serialize in
//! sorted order, so save/load round trips are byte-deterministic.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{Array1, Array2};

use super::{AcousticModel, DenseLayer, LayerSpec, ModelConfig, ModelError};

const MAGIC: &[u8; 8] = b"LATKCKPT";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn put_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn put_i32(w: &mut impl Write, v: i32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
fn get_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
fn get_f64(r: &mut impl Read) -> Result<f64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
fn get_i32(r: &mut impl Read) -> Result<i32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(i32::from_le_bytes(b))
}

fn put_tensor(
    w: &mut impl Write,
    name: &str,
    dims: &[usize],
    data: impl Iterator<Item = f64>,
) -> std::io::Result<()> {
    put_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    put_u32(w, dims.len() as u32)?;
    for &d in dims {
        put_u32(w, d as u32)?;
    }
    for v in data {
        put_f64(w, v)?;
    }
    Ok(())
}

struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    fn into_mat(self, what: &str) -> Result<Array2<f64>, ModelError> {
        if self.dims.len() != 2 {
            return Err(ModelError::CorruptCheckpoint(format!(
                "{what}: expected 2-d tensor, got {:?}",
                self.dims
            )));
        }
        Array2::from_shape_vec((self.dims[0], self.dims[1]), self.data)
            .map_err(|e| ModelError::CorruptCheckpoint(format!("{what}: {e}")))
    }

    fn into_vec(self, what: &str) -> Result<Array1<f64>, ModelError> {
        if self.dims.len() != 1 {
            return Err(ModelError::CorruptCheckpoint(format!(
                "{what}: expected 1-d tensor, got {:?}",
                self.dims
            )));
        }
        Ok(Array1::from_vec(self.data))
    }
}

pub fn write_model(mut w: impl Write, model: &AcousticModel) -> Result<(), ModelError> {
    let cfg = model.config();
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    put_u32(&mut w, cfg.input_dim as u32)?;
    put_u32(&mut w, cfg.num_units as u32)?;
    put_u64(&mut w, cfg.seed)?;
    put_u32(&mut w, cfg.hidden_dims.len() as u32)?;
    for (dim, spec) in cfg.hidden_dims.iter().zip(&cfg.splices) {
        put_u32(&mut w, *dim as u32)?;
        put_u32(&mut w, spec.stride as u32)?;
        put_u32(&mut w, spec.offsets.len() as u32)?;
        for &o in &spec.offsets {
            put_i32(&mut w, o)?;
        }
    }
    put_f64(&mut w, model.last_lr)?;

    let n_layers = model.layers.len();
    let n_tensors = 2 * n_layers + 2 + n_layers + model.sd_lhuc.len() * n_layers;
    put_u32(&mut w, n_tensors as u32)?;
    for (i, layer) in model.layers.iter().enumerate() {
        put_tensor(
            &mut w,
            &format!("layer{i}.w"),
            &[layer.w.nrows(), layer.w.ncols()],
            layer.w.iter().copied(),
        )?;
        put_tensor(
            &mut w,
            &format!("layer{i}.b"),
            &[layer.b.len()],
            layer.b.iter().copied(),
        )?;
    }
    put_tensor(
        &mut w,
        "out.w",
        &[model.out_w.nrows(), model.out_w.ncols()],
        model.out_w.iter().copied(),
    )?;
    put_tensor(&mut w, "out.b", &[model.out_b.len()], model.out_b.iter().copied())?;
    for (i, v) in model.si_lhuc.iter().enumerate() {
        put_tensor(&mut w, &format!("lhuc.si.{i}"), &[v.len()], v.iter().copied())?;
    }
    for (spk, vecs) in &model.sd_lhuc {
        for (i, v) in vecs.iter().enumerate() {
            put_tensor(
                &mut w,
                &format!("lhuc.sd.{spk}.{i}"),
                &[v.len()],
                v.iter().copied(),
            )?;
        }
    }
    Ok(())
}

pub fn read_model(mut r: impl Read) -> Result<AcousticModel, ModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::CorruptCheckpoint("bad magic".into()));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(ModelError::CorruptCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let input_dim = get_u32(&mut r)? as usize;
    let num_units = get_u32(&mut r)? as usize;
    let seed = get_u64(&mut r)?;
    let n_hidden = get_u32(&mut r)? as usize;
    let mut hidden_dims = Vec::with_capacity(n_hidden);
    let mut splices = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden_dims.push(get_u32(&mut r)? as usize);
        let stride = get_u32(&mut r)? as usize;
        let n_off = get_u32(&mut r)? as usize;
        let mut offsets = Vec::with_capacity(n_off);
        for _ in 0..n_off {
            offsets.push(get_i32(&mut r)?);
        }
        splices.push(LayerSpec { offsets, stride });
    }
    let cfg = ModelConfig {
        input_dim,
        hidden_dims,
        splices,
        num_units,
        seed,
    };
    cfg.validate()
        .map_err(|e| ModelError::CorruptCheckpoint(format!("bad stored config: {e}")))?;
    let last_lr = get_f64(&mut r)?;

    let n_tensors = get_u32(&mut r)? as usize;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = get_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(ModelError::CorruptCheckpoint("tensor name too long".into()));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| ModelError::CorruptCheckpoint(format!("tensor name: {e}")))?;
        let ndim = get_u32(&mut r)? as usize;
        if ndim > 2 {
            return Err(ModelError::CorruptCheckpoint(format!(
                "tensor {name} has {ndim} dims"
            )));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(get_u32(&mut r)? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(get_f64(&mut r)?);
        }
        tensors.insert(name, Tensor { dims, data });
    }

    let mut take = |name: &str| -> Result<Tensor, ModelError> {
        tensors
            .remove(name)
            .ok_or_else(|| ModelError::CorruptCheckpoint(format!("missing tensor {name}")))
    };

    let mut layers = Vec::with_capacity(n_hidden);
    for i in 0..n_hidden {
        let w = take(&format!("layer{i}.w"))?.into_mat(&format!("layer{i}.w"))?;
        let b = take(&format!("layer{i}.b"))?.into_vec(&format!("layer{i}.b"))?;
        layers.push(DenseLayer { w, b });
    }
    let out_w = take("out.w")?.into_mat("out.w")?;
    let out_b = take("out.b")?.into_vec("out.b")?;
    let mut si_lhuc = Vec::with_capacity(n_hidden);
    for i in 0..n_hidden {
        si_lhuc.push(take(&format!("lhuc.si.{i}"))?.into_vec("lhuc.si")?);
    }
    // Remaining tensors are speaker vectors: lhuc.sd.<speaker>.<layer>.
    let mut sd_lhuc: BTreeMap<String, Vec<Array1<f64>>> = BTreeMap::new();
    let mut by_speaker: BTreeMap<String, Vec<(usize, Tensor)>> = BTreeMap::new();
    for (name, t) in tensors {
        let rest = name.strip_prefix("lhuc.sd.").ok_or_else(|| {
            ModelError::CorruptCheckpoint(format!("unexpected tensor {name}"))
        })?;
        let (spk, idx) = rest.rsplit_once('.').ok_or_else(|| {
            ModelError::CorruptCheckpoint(format!("bad speaker tensor name {name}"))
        })?;
        let idx: usize = idx
            .parse()
            .map_err(|e| ModelError::CorruptCheckpoint(format!("{name}: {e}")))?;
        by_speaker.entry(spk.to_string()).or_default().push((idx, t));
    }
    for (spk, mut entries) in by_speaker {
        entries.sort_by_key(|&(i, _)| i);
        if entries.iter().map(|&(i, _)| i).ne(0..n_hidden) {
            return Err(ModelError::CorruptCheckpoint(format!(
                "speaker {spk} has wrong LHUC layer set"
            )));
        }
        let vecs = entries
            .into_iter()
            .map(|(_, t)| t.into_vec("lhuc.sd"))
            .collect::<Result<Vec<_>, _>>()?;
        sd_lhuc.insert(spk, vecs);
    }

    let model = AcousticModel {
        cfg,
        layers,
        out_w,
        out_b,
        si_lhuc,
        sd_lhuc,
        last_lr,
    };
    model.check_shapes()?;
    Ok(model)
}

impl AcousticModel {
    fn check_shapes(&self) -> Result<(), ModelError> {
        let cfg = &self.cfg;
        let mut in_dim = cfg.input_dim;
        for (l, layer) in self.layers.iter().enumerate() {
            let spliced = in_dim * cfg.splices[l].offsets.len();
            if layer.w.dim() != (spliced, cfg.hidden_dims[l]) || layer.b.len() != cfg.hidden_dims[l]
            {
                return Err(ModelError::CorruptCheckpoint(format!(
                    "layer {l} tensor shapes disagree with config"
                )));
            }
            in_dim = cfg.hidden_dims[l];
        }
        if self.out_w.dim() != (in_dim, cfg.num_units) || self.out_b.len() != cfg.num_units {
            return Err(ModelError::CorruptCheckpoint(
                "output tensor shapes disagree with config".into(),
            ));
        }
        for (l, v) in self.si_lhuc.iter().enumerate() {
            if v.len() != cfg.hidden_dims[l] {
                return Err(ModelError::CorruptCheckpoint(format!(
                    "SI LHUC vector {l} has wrong width"
                )));
            }
        }
        for (spk, vecs) in &self.sd_lhuc {
            if vecs.len() != cfg.hidden_dims.len()
                || vecs
                    .iter()
                    .zip(&cfg.hidden_dims)
                    .any(|(v, &d)| v.len() != d)
            {
                return Err(ModelError::CorruptCheckpoint(format!(
                    "speaker {spk} LHUC vectors have wrong widths"
                )));
            }
        }
        Ok(())
    }

    /// Serialize to an in-memory checkpoint (handy for exact diffs).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_model(&mut buf, self).expect("in-memory serialization cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), ModelError> {
        let f = std::fs::File::create(path)?;
        write_model(std::io::BufWriter::new(f), self)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ModelError> {
        let f = std::fs::File::open(path)?;
        read_model(std::io::BufReader::new(f))
    }
}
