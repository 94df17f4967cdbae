//! Panel CSV format.
//!
//! One row per `(unit, t)` with header
//! `unit,t,z,x_1,…,x_p,y[,true_blip]`. Row `t` (1-based) carries the
//! treatment `Z_t` and the covariates `X_{t-1}` observed before it; `y` is
//! repeated on every row of a unit. `true_blip` is present only when every
//! unit carries ground truth. Rows must be grouped by unit with `t = 1..T`.

use std::io::{Read, Write};

use super::{Panel, Trajectory};
use crate::error::{Result, TerraError};

fn csv_err(e: csv::Error) -> TerraError {
    TerraError::Parse(format!("panel csv: {e}"))
}

pub fn write_panel_csv<W: Write>(panel: &Panel, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let with_truth = panel.has_ground_truth();
    let mut header = vec!["unit".to_string(), "t".into(), "z".into()];
    header.extend((1..=panel.n_covariates()).map(|j| format!("x_{j}")));
    header.push("y".into());
    if with_truth {
        header.push("true_blip".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for (i, tr) in panel.trajectories().iter().enumerate() {
        for t in 1..=panel.horizon() {
            let mut rec = vec![i.to_string(), t.to_string(), tr.z(t).to_string()];
            rec.extend(tr.history_x(t).iter().map(f64::to_string));
            rec.push(tr.outcome.to_string());
            if let Some(b) = &tr.true_blips {
                rec.push(b[t - 1].to_string());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a panel; `n_treatments` defaults to one more than the largest arm
/// seen (and at least 2).
pub fn read_panel_csv<R: Read>(input: R, n_treatments: Option<usize>) -> Result<Panel> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 5 || cols[..3] != ["unit", "t", "z"] {
        return Err(TerraError::Parse(format!("panel csv: unexpected header {cols:?}")));
    }
    let with_truth = cols.last() == Some(&"true_blip");
    let y_col = if with_truth { cols.len() - 2 } else { cols.len() - 1 };
    if cols[y_col] != "y" {
        return Err(TerraError::Parse("panel csv: missing y column".into()));
    }
    let p = y_col - 3;
    for (j, c) in cols[3..y_col].iter().enumerate() {
        if *c != format!("x_{}", j + 1) {
            return Err(TerraError::Parse(format!("panel csv: expected x_{} got {c}", j + 1)));
        }
    }

    let num = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| TerraError::Parse(format!("panel csv: bad {what} value {s:?}")))
    };
    let idx = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| TerraError::Parse(format!("panel csv: bad {what} value {s:?}")))
    };

    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut current: Option<usize> = None;
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let unit = idx(&rec[0], "unit")?;
        let t = idx(&rec[1], "t")?;
        let z = idx(&rec[2], "z")?;
        let x = (0..p).map(|j| num(&rec[3 + j], "x")).collect::<Result<Vec<_>>>()?;
        let y = num(&rec[y_col], "y")?;
        if current != Some(unit) {
            if t != 1 {
                return Err(TerraError::Parse(format!("panel csv: unit {unit} does not start at t=1")));
            }
            trajectories.push(Trajectory {
                covariates: Vec::new(),
                treatments: Vec::new(),
                outcome: y,
                true_blips: with_truth.then(Vec::new),
            });
            current = Some(unit);
        }
        let tr = trajectories.last_mut().expect("pushed above");
        if t != tr.treatments.len() + 1 {
            return Err(TerraError::Parse(format!("panel csv: unit {unit} has t={t} out of order")));
        }
        if y != tr.outcome {
            return Err(TerraError::Parse(format!("panel csv: unit {unit} has inconsistent y")));
        }
        tr.covariates.push(x);
        tr.treatments.push(z);
        if let Some(b) = tr.true_blips.as_mut() {
            b.push(num(&rec[y_col + 1], "true_blip")?);
        }
    }
    let k = n_treatments.unwrap_or_else(|| {
        trajectories
            .iter()
            .flat_map(|t| t.treatments.iter().copied())
            .max()
            .map_or(2, |m| (m + 1).max(2))
    });
    Panel::new(trajectories, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn csv_round_trip(
            n in 1usize..4,
            t in 1usize..4,
            seed_vals in proptest::collection::vec(-1e3..1e3f64, 64),
            truth in any::<bool>(),
        ) {
            let mut k = 0;
            let mut next = || { k += 1; seed_vals[k % seed_vals.len()] * (k as f64).sqrt() };
            let trs: Vec<Trajectory> = (0..n).map(|i| Trajectory {
                covariates: (0..t).map(|_| vec![next(), next()]).collect(),
                treatments: (0..t).map(|s| (i + s) % 3).collect(),
                outcome: next(),
                true_blips: truth.then(|| (0..t).map(|_| next()).collect()),
            }).collect();
            let panel = Panel::new(trs, 3).unwrap();
            let mut buf = Vec::new();
            write_panel_csv(&panel, &mut buf).unwrap();
            let back = read_panel_csv(buf.as_slice(), Some(3)).unwrap();
            prop_assert_eq!(back, panel);
        }
    }

    #[test]
    fn header_is_documented_layout() {
        let panel = Panel::new(
            vec![Trajectory {
                covariates: vec![vec![0.5, -1.0]],
                treatments: vec![1],
                outcome: 2.0,
                true_blips: Some(vec![0.25]),
            }],
            2,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_panel_csv(&panel, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "unit,t,z,x_1,x_2,y,true_blip\n0,1,1,0.5,-1,2,0.25\n");
    }

    #[test]
    fn malformed_input_is_rejected() {
        assert!(read_panel_csv("a,b\n1,2\n".as_bytes(), None).is_err());
        assert!(read_panel_csv("unit,t,z,x_1,y\n0,2,0,1,1\n".as_bytes(), None).is_err());
        assert!(read_panel_csv("unit,t,z,x_1,y\n0,1,0,1,1\n0,2,0,1,3\n".as_bytes(), None).is_err());
    }
}
