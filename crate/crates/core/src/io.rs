//! Plain-text container for representations, heads and ground truths.
//!
//! ```text
//! # mctl-model 1
//! rep subspace d=20 r=3
//! matrix 20 3
//! <one row per line, entries as {:.16e}>
//! head pre cap=1e0 output_cap=none
//! matrix 3 29
//! ...
//! covariates sigma_min=1e0 sigma_max=1e0 norm_cap=1.3416407864998737e1
//! matrix 20 20
//! ...
//! ```
//!
//! A network representation is written as `rep mlp depth=K` followed by one
//! `layer cap=<M(p)>` line and matrix per layer. Entries carry 17 significant
//! digits, so reading back is exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{CovariateSpec, GroundTruth};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{LinearHead, MlpRep, Representation, SubspaceRep};

const MAGIC: &str = "# mctl-model 1";

/// A representation with named heads and an optional covariate law.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub rep: Representation,
    pub heads: Vec<(String, LinearHead)>,
    pub covariates: Option<CovariateSpec>,
}

impl ModelBundle {
    pub fn new(rep: Representation) -> Self {
        Self {
            rep,
            heads: Vec::new(),
            covariates: None,
        }
    }

    pub fn with_head(mut self, name: &str, head: LinearHead) -> Self {
        self.heads.push((name.to_string(), head));
        self
    }

    pub fn head(&self, name: &str) -> Option<&LinearHead> {
        self.heads.iter().find(|(n, _)| n == name).map(|(_, h)| h)
    }

    pub fn from_truth(truth: &GroundTruth, spec: &CovariateSpec) -> Self {
        let mut b = Self::new(truth.rep.clone())
            .with_head("pre", truth.pre_head.clone())
            .with_head("down", truth.down_head.clone());
        b.covariates = Some(spec.clone());
        b
    }

    /// Splits a bundle written by [`ModelBundle::from_truth`].
    pub fn into_truth(self) -> Result<(GroundTruth, CovariateSpec)> {
        let pre = self
            .head("pre")
            .cloned()
            .ok_or_else(|| Error::Parse("truth file has no 'pre' head".into()))?;
        let down = self
            .head("down")
            .cloned()
            .ok_or_else(|| Error::Parse("truth file has no 'down' head".into()))?;
        let spec = self
            .covariates
            .ok_or_else(|| Error::Parse("truth file has no covariate section".into()))?;
        Ok((GroundTruth::new(self.rep, pre, down)?, spec))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        match &self.rep {
            Representation::Subspace(s) => {
                let _ = writeln!(out, "rep subspace d={} r={}", s.ambient_dim(), s.rank());
                write_matrix(&mut out, s.basis());
            }
            Representation::Mlp(m) => {
                let _ = writeln!(out, "rep mlp depth={}", m.depth());
                for (w, cap) in m.layers().iter().zip(m.caps()) {
                    let _ = writeln!(out, "layer cap={}", fmt_f64(*cap));
                    write_matrix(&mut out, w);
                }
            }
        }
        for (name, head) in &self.heads {
            let oc = head.output_cap().map_or("none".to_string(), fmt_f64);
            let _ = writeln!(out, "head {name} cap={} output_cap={oc}", fmt_f64(head.column_cap()));
            write_matrix(&mut out, head.alpha());
        }
        if let Some(spec) = &self.covariates {
            let _ = writeln!(
                out,
                "covariates sigma_min={} sigma_max={} norm_cap={}",
                fmt_f64(spec.sigma_min()),
                fmt_f64(spec.sigma_max()),
                fmt_f64(spec.norm_cap())
            );
            write_matrix(&mut out, spec.sigma());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = Lines {
            inner: text.lines().enumerate(),
        };
        let (_, first) = lines.next_line()?;
        if first.trim() != MAGIC {
            return Err(Error::Parse(format!("expected '{MAGIC}' header")));
        }
        let (ln, rep_line) = lines.next_line()?;
        let (kind, fields) = keyword(rep_line, "rep", ln)?;
        let rep = match kind.as_str() {
            "subspace" => {
                let b = lines.matrix()?;
                let expect = (field_usize(&fields, "d", ln)?, field_usize(&fields, "r", ln)?);
                if b.shape() != expect {
                    return Err(Error::Parse(format!("line {}: basis shape {:?} != {expect:?}", ln + 1, b.shape())));
                }
                Representation::Subspace(SubspaceRep::new(b)?)
            }
            "mlp" => {
                let depth = field_usize(&fields, "depth", ln)?;
                let mut layers = Vec::with_capacity(depth);
                let mut caps = Vec::with_capacity(depth);
                for _ in 0..depth {
                    let (ln, line) = lines.next_line()?;
                    let f = unnamed(line, "layer", ln)?;
                    caps.push(field_f64(&f, "cap", ln)?);
                    layers.push(lines.matrix()?);
                }
                Representation::Mlp(MlpRep::new(layers, caps)?)
            }
            other => return Err(Error::Parse(format!("line {}: unknown representation '{other}'", ln + 1))),
        };
        let mut bundle = ModelBundle::new(rep);
        while let Some((ln, line)) = lines.try_next_line() {
            if line.starts_with("head ") {
                let (name, f) = keyword(line, "head", ln)?;
                let cap = field_f64(&f, "cap", ln)?;
                let oc = match field(&f, "output_cap", ln)? {
                    "none" => None,
                    v => Some(parse_f64(v, ln)?),
                };
                let alpha = lines.matrix()?;
                bundle.heads.push((name, LinearHead::new(alpha, cap, oc)?));
            } else if line.starts_with("covariates ") {
                let f = unnamed(line, "covariates", ln)?;
                let sigma = lines.matrix()?;
                bundle.covariates = Some(CovariateSpec::new(
                    sigma,
                    field_f64(&f, "sigma_min", ln)?,
                    field_f64(&f, "sigma_max", ln)?,
                    field_f64(&f, "norm_cap", ln)?,
                )?);
            } else {
                return Err(Error::Parse(format!("line {}: unexpected '{line}'", ln + 1)));
            }
        }
        Ok(bundle)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_matrix(out: &mut String, m: &DenseMatrix) {
    let _ = writeln!(out, "matrix {} {}", m.rows(), m.cols());
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        for (i, l) in self.inner.by_ref() {
            if !l.trim().is_empty() {
                return Ok((i, l.trim()));
            }
        }
        Err(Error::Parse("unexpected end of model file".into()))
    }

    fn try_next_line(&mut self) -> Option<(usize, &'a str)> {
        self.inner
            .by_ref()
            .find(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (i, l.trim()))
    }

    fn matrix(&mut self) -> Result<DenseMatrix> {
        let (ln, header) = self.next_line()?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("matrix") {
            return Err(Error::Parse(format!("line {}: expected 'matrix R C'", ln + 1)));
        }
        let dim = |p: Option<&str>| -> Result<usize> {
            p.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse(format!("line {}: bad matrix header", ln + 1)))
        };
        let rows = dim(parts.next())?;
        let cols = dim(parts.next())?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (ln, line) = self.next_line()?;
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(parse_f64(tok, ln)?);
            }
            if data.len() - before != cols {
                return Err(Error::Parse(format!("line {}: expected {cols} entries", ln + 1)));
            }
        }
        DenseMatrix::from_vec(rows, cols, data)
    }
}

fn fields_of(rest: &str) -> Vec<(String, String)> {
    rest.split_whitespace()
        .filter_map(|f| f.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

/// Splits `"<kw> <name> k=v ..."` into the name and the fields.
fn keyword(line: &str, kw: &str, ln: usize) -> Result<(String, Vec<(String, String)>)> {
    let rest = line
        .strip_prefix(kw)
        .ok_or_else(|| Error::Parse(format!("line {}: expected '{kw}'", ln + 1)))?;
    let mut parts = rest.split_whitespace();
    let name = parts
        .next()
        .filter(|p| !p.contains('='))
        .ok_or_else(|| Error::Parse(format!("line {}: '{kw}' needs a name", ln + 1)))?;
    Ok((name.to_string(), fields_of(&parts.collect::<Vec<_>>().join(" "))))
}

/// Fields of `"<kw> k=v ..."`.
fn unnamed(line: &str, kw: &str, ln: usize) -> Result<Vec<(String, String)>> {
    line.strip_prefix(kw)
        .map(fields_of)
        .ok_or_else(|| Error::Parse(format!("line {}: expected '{kw}'", ln + 1)))
}

fn field<'f>(fields: &'f [(String, String)], key: &str, ln: usize) -> Result<&'f str> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Parse(format!("line {}: missing '{key}='", ln + 1)))
}

fn parse_f64(v: &str, ln: usize) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Parse(format!("line {}: bad number '{v}'", ln + 1)))
}

fn field_f64(fields: &[(String, String)], key: &str, ln: usize) -> Result<f64> {
    parse_f64(field(fields, key, ln)?, ln)
}

fn field_usize(fields: &[(String, String)], key: &str, ln: usize) -> Result<usize> {
    let v = field(fields, key, ln)?;
    v.parse()
        .map_err(|_| Error::Parse(format!("line {}: bad integer '{v}'", ln + 1)))
}
