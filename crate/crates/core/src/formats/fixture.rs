//! Golden fixture container ("GFIX").
//!
//! ```text
//! magic  47 46 49 58 ("GFIX")
//! u32    version = 1
//! u64    seed the fixture was generated from
//! u16    op length,   op bytes    (which operation to replay)
//! u16    name length, name bytes  (case name)
//! f64    forward relative tolerance
//! f64    gradient relative tolerance
//! u32    tensor count, then per tensor:
//!          u16 name length, name bytes
//!          u8  role (0 input, 1 expected output, 2 expected gradient)
//!          u8  rank, u32 dims[rank]
//!          f64 payload, row-major
//! ```

use std::path::Path;

use super::{put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GFIX";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Input,
    Expected,
    Gradient,
}

impl Role {
    fn code(self) -> u8 {
        match self {
            Role::Input => 0,
            Role::Expected => 1,
            Role::Gradient => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Role::Input),
            1 => Ok(Role::Expected),
            2 => Ok(Role::Gradient),
            _ => Err(Error::Format(format!("GFIX: unknown tensor role {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureTensor {
    pub name: String,
    pub role: Role,
    pub tensor: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    pub forward: f64,
    pub gradient: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            forward: 1e-5,
            gradient: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub seed: u64,
    pub op: String,
    pub name: String,
    pub tolerances: Tolerances,
    pub tensors: Vec<FixtureTensor>,
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Format(format!("GFIX: string `{s}` too long")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

impl Fixture {
    pub fn new(op: &str, name: &str, seed: u64) -> Self {
        Fixture {
            seed,
            op: op.into(),
            name: name.into(),
            tolerances: Tolerances::default(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, role: Role, tensor: Tensor) -> &mut Self {
        self.tensors.push(FixtureTensor {
            name: name.into(),
            role,
            tensor,
        });
        self
    }

    pub fn get(&self, name: &str, role: Role) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name && t.role == role)
            .map(|t| &t.tensor)
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &FixtureTensor> {
        self.tensors.iter().filter(move |t| t.role == role)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.op)?;
        put_str(&mut out, &self.name)?;
        out.extend_from_slice(&self.tolerances.forward.to_le_bytes());
        out.extend_from_slice(&self.tolerances.gradient.to_le_bytes());
        put_u32(&mut out, to_u32(self.tensors.len(), "tensor count")?);
        for t in &self.tensors {
            put_str(&mut out, &t.name)?;
            out.push(t.role.code());
            let rank = u8::try_from(t.tensor.rank()).map_err(|_| Error::Format("GFIX: rank too large".into()))?;
            out.push(rank);
            for &d in t.tensor.shape() {
                put_u32(&mut out, to_u32(d, "dimension")?);
            }
            for v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "GFIX");
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let seed = r.u64()?;
        let len = r.u16()? as usize;
        let op = r.string(len)?;
        let len = r.u16()? as usize;
        let name = r.string(len)?;
        let forward = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let gradient = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let len = r.u16()? as usize;
            let tname = r.string(len)?;
            let role = Role::from_code(r.u8()?)?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format("GFIX: shape overflows".into()))?;
            let data = r.f64s(numel)?;
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(format!("GFIX: `{tname}`: {e}")))?;
            tensors.push(FixtureTensor {
                name: tname,
                role,
                tensor,
            });
        }
        r.finish()?;
        Ok(Fixture {
            seed,
            op,
            name,
            tolerances: Tolerances { forward, gradient },
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Element-wise agreement between two same-shape tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub name: String,
    pub max_abs: f64,
    pub max_rel: f64,
    /// Flat index of the largest relative error.
    pub worst: usize,
    pub tol: f64,
}

impl Comparison {
    pub fn passed(&self) -> bool {
        self.max_rel < self.tol
    }
}

/// Relative error `|a − b| / max(|a|, |b|, 1e-8)`, symmetric in its arguments.
pub fn compare(name: &str, a: &Tensor, b: &Tensor, tol: f64) -> Result<Comparison> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "`{name}`: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let mut c = Comparison {
        name: name.into(),
        max_abs: 0.0,
        max_rel: 0.0,
        worst: 0,
        tol,
    };
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        let abs = (x - y).abs();
        let rel = if abs == 0.0 { 0.0 } else { abs / x.abs().max(y.abs()).max(1e-8) };
        let rel = if rel.is_nan() { f64::INFINITY } else { rel };
        c.max_abs = c.max_abs.max(abs);
        if rel > c.max_rel {
            c.max_rel = rel;
            c.worst = i;
        }
    }
    Ok(c)
}
