//! Named parameter arrays with paired gradients, and the portable text
//! checkpoint format.
//!
//! ```text
//! ssmstyler-ckpt v1
//! enc.layer0.weight 3 8 1 9
//! -1.2345678901234567e-1 ...
//! ```
//!
//! Values are row-major, 17 significant digits, so a load/save cycle is
//! byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "ssmstyler-ckpt v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "value length does not match shape {shape:?}");
        Param {
            grad: vec![0.0; n],
            shape,
            value,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param::new(shape, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Gradient contributions produced by a backward pass, keyed by parameter name.
pub type Grads = BTreeMap<String, Vec<f64>>;

/// Add `g` into the entry `name` of a gradient map, allocating on first use.
pub fn accumulate(grads: &mut Grads, name: &str, g: &[f64]) {
    match grads.get_mut(name) {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => {
            grads.insert(name.to_string(), g.to_vec());
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.entries.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Value array of `name`, checked against an expected shape.
    pub fn value(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let p = self.get(name)?;
        if p.shape != shape {
            return Err(Error::config(format!(
                "parameter `{name}` has shape {:?}, expected {shape:?}",
                p.shape
            )));
        }
        Ok(&p.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Param::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add a backward pass's contributions into the stored gradients.
    pub fn add_grads(&mut self, grads: &Grads) -> Result<()> {
        for (name, g) in grads {
            let p = self.get_mut(name)?;
            if p.grad.len() != g.len() {
                return Err(Error::config(format!(
                    "gradient for `{name}` has {} entries, parameter has {}",
                    g.len(),
                    p.grad.len()
                )));
            }
            for (a, v) in p.grad.iter_mut().zip(g) {
                *a += v;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut line = String::new();
        writeln!(w, "{CHECKPOINT_HEADER}")?;
        for (name, p) in &self.entries {
            line.clear();
            write!(line, "{name} {}", p.shape.len()).unwrap();
            for d in &p.shape {
                write!(line, " {d}").unwrap();
            }
            writeln!(w, "{line}")?;
            line.clear();
            for (i, v) in p.value.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{v:.16e}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("checkpoint text is ASCII")
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::CorruptCheckpoint("empty file".into()))?;
        let header = header.trim_end();
        if header != CHECKPOINT_HEADER {
            return Err(Error::CorruptCheckpoint(format!(
                "unsupported header `{header}`, expected `{CHECKPOINT_HEADER}`"
            )));
        }
        let mut store = ParamStore::new();
        while let Some(head) = lines.next().transpose()? {
            if head.trim().is_empty() {
                continue;
            }
            let mut fields = head.split_whitespace();
            let name = fields.next().unwrap().to_string();
            let ndim: usize = parse_field(fields.next(), &name, "ndim")?;
            let shape = (0..ndim)
                .map(|_| parse_field(fields.next(), &name, "dimension"))
                .collect::<Result<Vec<usize>>>()?;
            if fields.next().is_some() {
                return Err(Error::CorruptCheckpoint(format!(
                    "trailing fields in header of `{name}`"
                )));
            }
            let n: usize = shape.iter().product();
            let body = lines.next().transpose()?.unwrap_or_default();
            let value = body
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| {
                        Error::CorruptCheckpoint(format!("bad value `{tok}` in `{name}`"))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if value.len() != n {
                return Err(Error::CorruptCheckpoint(format!(
                    "`{name}` declares {n} values, found {}",
                    value.len()
                )));
            }
            if value.iter().any(|v| !v.is_finite()) {
                return Err(Error::CorruptCheckpoint(format!("non-finite value in `{name}`")));
            }
            if store.contains(&name) {
                return Err(Error::CorruptCheckpoint(format!("duplicate parameter `{name}`")));
            }
            store.insert(name, Param::new(shape, value));
        }
        Ok(store)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        Self::read_from(text.as_bytes())
    }
}

fn parse_field(tok: Option<&str>, name: &str, what: &str) -> Result<usize> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::CorruptCheckpoint(format!("missing or bad {what} for `{name}`")))
}
