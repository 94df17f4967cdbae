//! Plain-text checkpoints.
//!
//! ```text
//! terra-checkpoint 1
//! arch d_model n_heads n_layers d_ff dropout_p n_covariates n_treatments horizon
//! x_mean v1 .. vp
//! x_scale v1 .. vp
//! y mean scale
//! param <name> <dim> [<dim> ..]
//! <values, space separated>
//! ...
//! end
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! save/load cycle is exact.

use std::io::{BufRead, Write};

use super::{ArchConfig, Scaler, Terra};
use crate::error::{Result, TerraError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "terra-checkpoint 1";

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

pub fn write_checkpoint<W: Write>(model: &Terra, mut w: W) -> Result<()> {
    let a = model.arch();
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    writeln!(
        w,
        "arch {} {} {} {} {:?} {} {} {}",
        a.d_model, a.n_heads, a.n_layers, a.d_ff, a.dropout_p, a.n_covariates, a.n_treatments, a.horizon
    )?;
    let s = model.scaler();
    writeln!(w, "x_mean {}", join(&s.x_mean))?;
    writeln!(w, "x_scale {}", join(&s.x_scale))?;
    writeln!(w, "y {:?} {:?}", s.y_mean, s.y_scale)?;
    for (name, t) in model.params().names().iter().zip(model.params().tensors()) {
        let dims = t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        writeln!(w, "param {name} {dims}")?;
        writeln!(w, "{}", join(t.data()))?;
    }
    writeln!(w, "end")?;
    Ok(())
}

fn parse_err(line: usize, msg: impl std::fmt::Display) -> TerraError {
    TerraError::Parse(format!("checkpoint line {line}: {msg}"))
}

fn floats(line: usize, words: &[&str]) -> Result<Vec<f64>> {
    words
        .iter()
        .map(|w| w.parse::<f64>().map_err(|e| parse_err(line, format!("{w:?}: {e}"))))
        .collect()
}

fn keyed<'a>(lines: &mut impl Iterator<Item = (usize, String)>, key: &str, buf: &'a mut String) -> Result<(usize, Vec<&'a str>)> {
    let (no, line) = lines.next().ok_or_else(|| parse_err(0, format!("missing `{key}`")))?;
    *buf = line;
    let mut words = buf.split_whitespace();
    if words.next() != Some(key) {
        return Err(parse_err(no, format!("expected `{key}`")));
    }
    Ok((no, words.collect()))
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Terra> {
    let mut lines = r
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|(_, l)| !l.trim().is_empty());

    match lines.next() {
        Some((_, l)) if l.trim() == CHECKPOINT_MAGIC => {}
        Some((no, l)) => return Err(parse_err(no, format!("unsupported header {l:?}"))),
        None => return Err(parse_err(0, "empty checkpoint")),
    }

    let mut buf = String::new();
    let (no, w) = keyed(&mut lines, "arch", &mut buf)?;
    if w.len() != 8 {
        return Err(parse_err(no, "arch needs 8 fields"));
    }
    let u = |i: usize| w[i].parse::<usize>().map_err(|e| parse_err(no, format!("{}: {e}", w[i])));
    let arch = ArchConfig {
        d_model: u(0)?,
        n_heads: u(1)?,
        n_layers: u(2)?,
        d_ff: u(3)?,
        dropout_p: w[4].parse().map_err(|e| parse_err(no, format!("{}: {e}", w[4])))?,
        n_covariates: u(5)?,
        n_treatments: u(6)?,
        horizon: u(7)?,
    };
    let (no, w) = keyed(&mut lines, "x_mean", &mut buf)?;
    let x_mean = floats(no, &w)?;
    let (no, w) = keyed(&mut lines, "x_scale", &mut buf)?;
    let x_scale = floats(no, &w)?;
    let (no, w) = keyed(&mut lines, "y", &mut buf)?;
    let y = floats(no, &w)?;
    if y.len() != 2 {
        return Err(parse_err(no, "y needs mean and scale"));
    }
    let scaler = Scaler {
        x_mean,
        x_scale,
        y_mean: y[0],
        y_scale: y[1],
    };

    let mut params = Vec::new();
    loop {
        let (no, line) = lines.next().ok_or_else(|| parse_err(0, "missing `end`"))?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.first() {
            Some(&"end") => break,
            Some(&"param") if words.len() >= 3 => {
                let name = words[1].to_string();
                let dims = words[2..]
                    .iter()
                    .map(|d| d.parse::<usize>().map_err(|e| parse_err(no, format!("{d}: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                let (vno, values) = lines.next().ok_or_else(|| parse_err(no, "missing values"))?;
                let data = floats(vno, &values.split_whitespace().collect::<Vec<_>>())?;
                let t = Tensor::new(dims, data).map_err(|e| parse_err(vno, e))?;
                params.push((name, t));
            }
            _ => return Err(parse_err(no, format!("unexpected {line:?}"))),
        }
    }
    Terra::from_parts(arch, scaler, params)
}
