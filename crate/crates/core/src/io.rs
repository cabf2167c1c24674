//! Binary tensor files and bank checkpoints.
//!
//! A tensor file is `b"MPOT"`, a little-endian `u32` version (1), a `u8`
//! dtype code (0 = f64, 1 = f32), a `u8` rank, one little-endian `u64` per
//! extent, then the row-major little-endian payload.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{GateConfig, GateKind};
use crate::layer::{MoeBank, MpoeExpertBank, Slot};
use crate::mpo::{FactorizationPlan, MpoFactors, Normalization};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MPOT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            _ => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Dtype::F64),
            "f32" => Ok(Dtype::F32),
            _ => Err(Error::Config(format!("unknown dtype {s:?}"))),
        }
    }
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>, dtype: Dtype) -> Result<Vec<u8>> {
    let ndim = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank {} exceeds 255", t.rank())))?;
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + dtype.size() * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(ndim);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        match dtype {
            Dtype::F64 => out.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
            Dtype::F32 => out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("truncated {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Parses a tensor file, promoting f32 payloads to f64.
pub fn decode_tensor(mut bytes: &[u8]) -> Result<(Tensor<f64>, Dtype)> {
    let b = &mut bytes;
    if take(b, 4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(b, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = Dtype::from_code(take(b, 1, "dtype")?[0])?;
    let ndim = take(b, 1, "rank")?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u64::from_le_bytes(take(b, 8, "extent")?.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large")))?);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let expected = len
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if b.len() != expected {
        return Err(Error::Format(format!("payload has {} bytes, expected {expected}", b.len())));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F64 => b
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>, dtype: Dtype) -> Result<()> {
    write_atomic(path, &encode_tensor(t, dtype)?)
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f64>> {
    Ok(decode_tensor(&fs::read(path)?)?.0)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub const CHECKPOINT_FORMAT: &str = "mpoe-checkpoint";
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotManifest {
    pub plan: FactorizationPlan,
    pub central_index: usize,
    pub bond_dims: Vec<usize>,
    pub central: String,
    /// `[expert][j]` file names.
    pub auxiliaries: Vec<Vec<String>>,
    /// `n_experts × len` matrix.
    pub biases: String,
    pub initial_central: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub n_experts: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub gate_kind: GateKind,
    pub gate_k: usize,
    pub noise_enabled: bool,
    pub gate_weights: String,
    pub noise_weights: Option<String>,
    pub w1: SlotManifest,
    pub w2: SlotManifest,
}

/// Saves `bank` under `dir` (created if missing), optionally with the
/// central tensors it started from.
pub fn save_checkpoint(dir: &Path, bank: &MpoeExpertBank<f64>, initial_central: Option<&[Tensor<f64>; 2]>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let put = |name: String, t: &Tensor<f64>| -> Result<String> {
        write_tensor(&dir.join(&name), t, Dtype::F64)?;
        Ok(name)
    };
    let n = bank.n_experts();
    let mut slots = Vec::with_capacity(2);
    for s in Slot::ALL {
        let sb = bank.slot(s);
        let tag = s.name();
        let central = put(format!("{tag}_central.mpot"), sb.central())?;
        let mut auxiliaries = Vec::with_capacity(n);
        for i in 0..n {
            let names = sb
                .auxiliaries(i)
                .iter()
                .enumerate()
                .map(|(j, t)| put(format!("{tag}_e{i}_a{}.mpot", sb.chain_position(j)), t))
                .collect::<Result<Vec<_>>>()?;
            auxiliaries.push(names);
        }
        let bias_rows: Vec<Vec<f64>> = (0..n).map(|i| bank.bias(s, i).to_vec()).collect();
        let biases = put(format!("{tag}_biases.mpot"), &Tensor::from_rows(&bias_rows)?)?;
        let initial_central = initial_central
            .map(|c| put(format!("{tag}_central_init.mpot"), &c[s.index()]))
            .transpose()?;
        slots.push(SlotManifest {
            plan: sb.plan().clone(),
            central_index: sb.central_index(),
            bond_dims: sb.factors(0)?.bond_dims().to_vec(),
            central,
            auxiliaries,
            biases,
            initial_central,
        });
    }
    let gate = bank.gate();
    let gate_weights = put("gate_weights.mpot".into(), gate.gate_weights())?;
    let noise_weights = gate
        .noise_weights()
        .map(|w| put("noise_weights.mpot".into(), w))
        .transpose()?;
    let w2 = slots.pop().expect("two slots");
    let w1 = slots.pop().expect("two slots");
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: VERSION,
        n_experts: n,
        d_model: bank.d_model(),
        d_ff: bank.d_ff(),
        gate_kind: gate.kind(),
        gate_k: gate.k(),
        noise_enabled: gate.noise_enabled(),
        gate_weights,
        noise_weights,
        w1,
        w2,
    };
    write_json(&dir.join(MANIFEST_NAME), &manifest)
}

fn checked_name(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = Path::new(name);
    if p.components().count() != 1 || p.is_absolute() {
        return Err(Error::Format(format!("checkpoint entry {name:?} escapes the directory")));
    }
    Ok(dir.join(p))
}

/// Loaded checkpoint: the bank and, when saved, its initial centrals.
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub bank: MpoeExpertBank<f64>,
    pub initial_central: Option<[Tensor<f64>; 2]>,
}

fn pair<X>(v: Vec<X>) -> [X; 2] {
    v.try_into().unwrap_or_else(|_| unreachable!("one entry per slot"))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = read_json(&dir.join(MANIFEST_NAME))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let get = |name: &str| read_tensor(&checked_name(dir, name)?);
    let n = manifest.n_experts;
    let mut centrals = Vec::with_capacity(2);
    let mut auxiliaries = Vec::with_capacity(2);
    let mut biases = Vec::with_capacity(2);
    let mut initial = Vec::with_capacity(2);
    for sm in [&manifest.w1, &manifest.w2] {
        centrals.push(get(&sm.central)?);
        auxiliaries.push(
            sm.auxiliaries
                .iter()
                .map(|names| names.iter().map(|f| get(f)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?,
        );
        let b = get(&sm.biases)?;
        if b.rank() != 2 || b.rows() != n {
            return Err(Error::Format(format!("bias matrix shape {:?}", b.shape())));
        }
        biases.push((0..n).map(|i| b.row(i).to_vec()).collect::<Vec<_>>());
        initial.push(sm.initial_central.as_deref().map(get).transpose()?);
    }
    let noise = manifest.noise_weights.as_deref().map(get).transpose()?;
    let gate = GateConfig::new(
        manifest.gate_kind,
        manifest.gate_k,
        get(&manifest.gate_weights)?,
        noise,
        manifest.noise_enabled,
    )?;
    let bank = MpoeExpertBank::from_parts(
        [manifest.w1.plan.clone(), manifest.w2.plan.clone()],
        pair(centrals),
        pair(auxiliaries),
        pair(biases),
        gate,
    )?;
    if (bank.d_model(), bank.d_ff()) != (manifest.d_model, manifest.d_ff) {
        return Err(Error::Format("manifest dimensions disagree with the stored tensors".into()));
    }
    let initial_central = match (initial.remove(0), initial.remove(0)) {
        (Some(a), Some(b)) => Some([a, b]),
        (None, None) => None,
        _ => return Err(Error::Format("initial central stored for only one slot".into())),
    };
    Ok(Checkpoint {
        manifest,
        bank,
        initial_central,
    })
}

pub const DECOMPOSITION_FORMAT: &str = "mpo-decomposition";

/// Description of a decomposition written by [`save_decomposition`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionManifest {
    pub format: String,
    pub version: u32,
    pub rows: usize,
    pub cols: usize,
    pub plan: FactorizationPlan,
    pub normalization: Normalization,
    /// `d_0..d_m`, boundaries included.
    pub bond_dims: Vec<usize>,
    pub eps: Vec<f64>,
    pub bound: f64,
    pub central_index: usize,
    pub central_params: usize,
    pub auxiliary_params: usize,
    /// `None` when there are no auxiliary tensors.
    pub gamma: Option<f64>,
    pub locals: Vec<String>,
    pub local_shapes: Vec<Vec<usize>>,
    pub dtype: Dtype,
    /// Frobenius norm of the source matrix.
    pub source_norm: f64,
    /// Largest `|W - reconstruction|` entry.
    pub max_abs_error: f64,
}

/// Writes every local tensor of `f` and a manifest into `dir`.
pub fn save_decomposition(
    dir: &Path,
    plan: &FactorizationPlan,
    f: &MpoFactors<f64>,
    normalization: Normalization,
    source: &Tensor<f64>,
    dtype: Dtype,
) -> Result<DecompositionManifest> {
    fs::create_dir_all(dir)?;
    let mut locals = Vec::with_capacity(f.m());
    for (k, t) in f.locals().iter().enumerate() {
        let name = format!("local_{k}.mpot");
        write_tensor(&dir.join(&name), t, dtype)?;
        locals.push(name);
    }
    let counts = f.count_params();
    let manifest = DecompositionManifest {
        format: DECOMPOSITION_FORMAT.into(),
        version: VERSION,
        rows: f.rows(),
        cols: f.cols(),
        plan: plan.clone(),
        normalization,
        bond_dims: f.bond_dims().to_vec(),
        eps: f.truncation_eps().to_vec(),
        bound: f.truncation_bound(),
        central_index: f.central_index(),
        central_params: counts.central,
        auxiliary_params: counts.auxiliary,
        gamma: counts.gamma.is_finite().then_some(counts.gamma),
        locals,
        local_shapes: f.locals().iter().map(|t| t.shape().to_vec()).collect(),
        dtype,
        source_norm: source.frobenius_norm(),
        max_abs_error: f.reconstruct()?.max_abs_diff(source)?,
    };
    write_json(&dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

pub fn load_decomposition(dir: &Path) -> Result<(DecompositionManifest, MpoFactors<f64>)> {
    let manifest: DecompositionManifest = read_json(&dir.join(MANIFEST_NAME))?;
    if manifest.format != DECOMPOSITION_FORMAT || manifest.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported decomposition {} v{}",
            manifest.format, manifest.version
        )));
    }
    let locals = manifest
        .locals
        .iter()
        .map(|n| read_tensor(&checked_name(dir, n)?))
        .collect::<Result<Vec<_>>>()?;
    let f = MpoFactors::from_locals(locals)?;
    if f.bond_dims() != manifest.bond_dims.as_slice() || (f.rows(), f.cols()) != (manifest.rows, manifest.cols) {
        return Err(Error::Format("stored tensors disagree with the manifest".into()));
    }
    Ok((manifest, f))
}
