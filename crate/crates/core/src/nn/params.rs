//! Named parameter collections, orthogonal initialization, and the array file format.
//!
//! Array file layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "POSAPARM"
//! version  u32      1
//! count    u32      number of arrays
//! repeated count times, ascending by name:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims u32 x ndim
//!   payload  f32 x prod(dims)
//! ```

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

pub const PARAM_MAGIC: &[u8; 8] = b"POSAPARM";
pub const PARAM_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Orthogonal rows/columns after flattening to `shape[0] x prod(shape[1..])`;
    /// 1-D shapes fall back to zeros.
    Orthogonal,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub init: Init,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Float> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Orthogonal matrix for `shape`, flattened to `rows x cols`. With `cols <= rows` the
/// columns are orthonormal, otherwise the rows are.
pub fn init_orthogonal(shape: &[usize], rng: &mut Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    if shape.len() < 2 {
        return vec![0.0; n];
    }
    let rows = shape[0];
    let cols = n / rows;
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let draws = rng.normals(tall * short);
    let a = DMatrix::from_column_slice(tall, short, &draws);
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; n];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
        }
    }
    out
}

impl<T: Float> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    /// Register a parameter; panics on a duplicate name.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut Rng) {
        let values = match init {
            Init::Orthogonal => init_orthogonal(shape, rng),
            Init::Zeros => vec![0.0; shape.iter().product()],
        };
        let prev = self.params.insert(
            name.to_string(),
            Param {
                value: Tensor::from_f64(shape, &values),
                init,
            },
        );
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, p)| (k.as_str(), &mut p.value))
    }

    pub fn init_of(&self, name: &str) -> Option<Init> {
        self.params.get(name).map(|p| p.init)
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            init: p.init,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Zero-filled store with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: Tensor::zeros(p.value.shape()),
                            init: Init::Zeros,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Copy values from `other`, which must have exactly the same names and shapes.
    pub fn assign_from(&mut self, other: &ParameterStore<T>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Shape(format!(
                "store has {} arrays, source has {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (name, p) in self.params.iter_mut() {
            let src = other
                .params
                .get(name)
                .ok_or_else(|| Error::Shape(format!("source is missing `{name}`")))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "`{name}` has shape {:?}, source {:?}",
                    p.value.shape(),
                    src.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

impl ParameterStore<f32> {
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(PARAM_MAGIC)?;
        w.write_all(&PARAM_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, p) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let shape = p.value.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(p.value.len() * 4);
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Parse an array block. Parameters read this way carry `Init::Zeros` as their
    /// init tag; the tag is informational only.
    pub fn read_from(r: &mut impl Read) -> std::result::Result<Self, FormatError> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != PARAM_MAGIC {
            return Err(FormatError::Corrupt("bad parameter magic".into()));
        }
        let version = read_u32(r)?;
        if version != PARAM_VERSION {
            return Err(FormatError::Version(version));
        }
        let count = read_u32(r)? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            if name_len > 4096 {
                return Err(FormatError::Corrupt("parameter name too long".into()));
            }
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| FormatError::Corrupt("name is not UTF-8".into()))?;
            let ndim = read_u32(r)? as usize;
            if ndim > 8 {
                return Err(FormatError::Corrupt(format!("`{name}` has {ndim} dims")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(r)? as usize);
            }
            let n: usize = shape.iter().product();
            if n > 1 << 28 {
                return Err(FormatError::Corrupt(format!("`{name}` is implausibly large")));
            }
            let mut buf = vec![0u8; n * 4];
            read_exact(r, &mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(
                name,
                Param {
                    value: Tensor::new(&shape, data),
                    init: Init::Zeros,
                },
            );
        }
        Ok(Self { params })
    }
}

#[derive(Debug)]
pub enum FormatError {
    Corrupt(String),
    Version(u32),
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> std::result::Result<(), FormatError> {
    r.read_exact(buf)
        .map_err(|e| FormatError::Corrupt(format!("truncated data: {e}")))
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::result::Result<u32, FormatError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Parameters of one store bound into a graph. Each name becomes one node the first
/// time it is used.
pub struct Bound<'g, 's, T> {
    graph: &'g Graph<T>,
    store: &'s ParameterStore<T>,
    trainable: bool,
    vars: RefCell<BTreeMap<String, Var<'g, T>>>,
}

impl<'g, 's, T: Float> Bound<'g, 's, T> {
    /// Parameters that receive gradients.
    pub fn trainable(graph: &'g Graph<T>, store: &'s ParameterStore<T>) -> Self {
        Self {
            graph,
            store,
            trainable: true,
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    /// Parameters treated as constants; gradients still flow through them to inputs.
    pub fn frozen(graph: &'g Graph<T>, store: &'s ParameterStore<T>) -> Self {
        Self {
            trainable: false,
            ..Self::trainable(graph, store)
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn var(&self, name: &str) -> Var<'g, T> {
        if let Some(v) = self.vars.borrow().get(name) {
            return *v;
        }
        let t = self.store.get(name).clone();
        let v = if self.trainable {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Gradients for every stored parameter; unused parameters get zeros.
    pub fn grads(&self, grads: &Gradients<T>) -> ParameterStore<T> {
        let vars = self.vars.borrow();
        let mut out = self.store.zeros_like();
        for (name, g) in out.iter_mut() {
            if let Some(v) = vars.get(name) {
                if let Some(gv) = grads.get(*v) {
                    *g = gv.clone();
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error over all checked entries.
    pub worst: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst_at: (String, usize),
    pub checked: usize,
}

/// Compare analytic gradients of a scalar function of the whole store against central
/// finite differences (step 1e-5) entry by entry.
pub fn check_store_gradients<F>(store: &ParameterStore<f64>, f: F) -> GradCheckReport
where
    F: for<'g, 's> Fn(&'g Graph<f64>, &Bound<'g, 's, f64>) -> Var<'g, f64>,
{
    let analytic = {
        let g = Graph::new();
        let p = Bound::trainable(&g, store);
        let out = f(&g, &p);
        let grads = g.backward(out);
        p.grads(&grads)
    };
    let eval = |s: &ParameterStore<f64>| {
        let g = Graph::new();
        let p = Bound::frozen(&g, s);
        f(&g, &p).item()
    };
    let h = 1e-5;
    let mut report = GradCheckReport {
        worst: 0.0,
        worst_at: (String::new(), 0),
        checked: 0,
    };
    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in &names {
        for j in 0..store.get(name).len() {
            let orig = store.get(name).data()[j];
            probe.get_mut(name).data_mut()[j] = orig + h;
            let plus = eval(&probe);
            probe.get_mut(name).data_mut()[j] = orig - h;
            let minus = eval(&probe);
            probe.get_mut(name).data_mut()[j] = orig;
            let num = (plus - minus) / (2.0 * h);
            let err = crate::autograd::gradcheck::rel_err(analytic.get(name).data()[j], num);
            if err > report.worst {
                report.worst = err;
                report.worst_at = (name.clone(), j);
            }
            report.checked += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram_error(q: &[f64], rows: usize, cols: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..cols {
            for b in 0..cols {
                let dot: f64 = (0..rows).map(|i| q[i * cols + a] * q[i * cols + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    #[test]
    fn square_orthogonal() {
        let q = init_orthogonal(&[4, 4], &mut Rng::new(0, 1));
        assert!(gram_error(&q, 4, 4) < 1e-5);
    }

    #[test]
    fn tall_matrix_has_orthonormal_columns() {
        let q = init_orthogonal(&[8, 4], &mut Rng::new(0, 2));
        assert!(gram_error(&q, 8, 4) < 1e-5);
    }

    #[test]
    fn wide_and_conv_shapes_have_orthonormal_rows() {
        // [4, 2, 3, 3] flattens to 4 x 18: rows orthonormal
        let q = init_orthogonal(&[4, 2, 3, 3], &mut Rng::new(0, 3));
        let t: Vec<f64> = (0..18 * 4).map(|i| q[(i % 4) * 18 + i / 4]).collect();
        assert!(gram_error(&t, 18, 4) < 1e-5);
    }

    #[test]
    fn orthogonal_is_deterministic_and_bias_is_zero() {
        let a = init_orthogonal(&[6, 3], &mut Rng::new(7, 1));
        let b = init_orthogonal(&[6, 3], &mut Rng::new(7, 1));
        assert_eq!(a, b);
        assert_eq!(init_orthogonal(&[5], &mut Rng::new(7, 1)), vec![0.0; 5]);
    }

    #[test]
    fn store_bytes_round_trip_and_truncation() {
        let mut s = ParameterStore::<f32>::new();
        let mut rng = Rng::new(1, 1);
        s.add("a.w", &[3, 2, 3, 3], Init::Orthogonal, &mut rng);
        s.add("a.b", &[3], Init::Zeros, &mut rng);
        let bytes = s.to_bytes();
        let back = ParameterStore::read_from(&mut bytes.as_slice()).unwrap();
        for (name, t) in s.iter() {
            assert_eq!(back.get(name).data(), t.data());
        }
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(ParameterStore::read_from(&mut &cut[..]), Err(FormatError::Corrupt(_))));
        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(matches!(ParameterStore::read_from(&mut bad_version.as_slice()), Err(FormatError::Version(9))));
    }
}
