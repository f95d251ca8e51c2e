//! File formats: row-major matrices in JSON, trajectory CSV, belief-set JSON.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Belief, Trajectory};

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>) -> std::result::Result<DMatrix<f64>, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix rows".into());
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
}

/// Serializes a matrix as a row-major nested array.
pub mod matrix {
    use super::*;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        from_rows(Vec::<Vec<f64>>::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Serializes a list of matrices as nested row-major arrays.
pub mod matrix_list {
    use super::*;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(
        ms: &[DMatrix<f64>],
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        ms.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Vec<DMatrix<f64>>, D::Error> {
        Vec::<Vec<Vec<f64>>>::deserialize(d)?
            .into_iter()
            .map(|rows| from_rows(rows).map_err(serde::de::Error::custom))
            .collect()
    }
}

/// Writes `t,o_1..o_d[,action][,state]`.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, w: W) -> Result<()> {
    traj.check()?;
    let d = traj.obs_dim().unwrap_or(0);
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("o_{i}")));
    if traj.actions.is_some() {
        header.push("action".into());
    }
    if traj.true_states.is_some() {
        header.push("state".into());
    }
    out.write_record(&header)?;
    for (t, o) in traj.observations.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(o.iter().map(|v| format!("{v:?}")));
        if let Some(a) = &traj.actions {
            rec.push(a[t].to_string());
        }
        if let Some(s) = &traj.true_states {
            rec.push(s[t].to_string());
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trajectory_csv<R: Read>(r: R) -> Result<Trajectory> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.first().map(String::as_str) != Some("t") {
        return Err(Error::MissingData("trajectory CSV must start with a `t` column".into()));
    }
    let obs_cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("o_"))
        .map(|(i, _)| i)
        .collect();
    for (k, &col) in obs_cols.iter().enumerate() {
        if header[col] != format!("o_{}", k + 1) {
            return Err(Error::MissingData(format!(
                "expected column o_{} but found {}",
                k + 1,
                header[col]
            )));
        }
    }
    if obs_cols.is_empty() {
        return Err(Error::MissingData("trajectory CSV has no o_* columns".into()));
    }
    let action_col = header.iter().position(|h| h == "action");
    let state_col = header.iter().position(|h| h == "state");
    let mut traj = Trajectory {
        actions: action_col.map(|_| Vec::new()),
        true_states: state_col.map(|_| Vec::new()),
        ..Default::default()
    };
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
        let parse_f = |i: usize| {
            field(i).parse::<f64>().map_err(|_| {
                Error::MissingData(format!("row {}: `{}` is not a number", line + 1, field(i)))
            })
        };
        let parse_u = |i: usize| {
            field(i).parse::<usize>().map_err(|_| {
                Error::MissingData(format!("row {}: `{}` is not an index", line + 1, field(i)))
            })
        };
        let obs: Vec<f64> = obs_cols.iter().map(|&i| parse_f(i)).collect::<Result<_>>()?;
        traj.observations.push(DVector::from_vec(obs));
        if let (Some(c), Some(v)) = (action_col, traj.actions.as_mut()) {
            v.push(parse_u(c)?);
        }
        if let (Some(c), Some(v)) = (state_col, traj.true_states.as_mut()) {
            v.push(parse_u(c)?);
        }
    }
    Ok(traj)
}

pub fn save_trajectory(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    write_trajectory_csv(traj, std::fs::File::create(path)?)
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    read_trajectory_csv(std::fs::File::open(path)?)
}

/// A belief-set file is a JSON list of probability vectors.
pub fn load_beliefs(path: impl AsRef<Path>) -> Result<Vec<Belief>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn save_beliefs(beliefs: &[Belief], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(beliefs)? + "\n")?;
    Ok(())
}

/// Parses `"0.5,0.5,0"` into a belief.
pub fn parse_belief(text: &str) -> Result<Belief> {
    let probs = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidBelief(format!("`{t}` is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    Belief::new(probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_csv_roundtrip() {
        let traj = Trajectory {
            observations: vec![
                DVector::from_vec(vec![0.1, -2.5]),
                DVector::from_vec(vec![1e-17, 3.0]),
            ],
            actions: Some(vec![1, 0]),
            true_states: Some(vec![2, 2]),
        };
        let mut buf = Vec::new();
        write_trajectory_csv(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,o_1,o_2,action,state\n"));
        assert_eq!(read_trajectory_csv(buf.as_slice()).unwrap(), traj);
    }

    #[test]
    fn observation_only_csv() {
        let text = "t,o_1\n0,1.5\n1,2.5\n";
        let traj = read_trajectory_csv(text.as_bytes()).unwrap();
        assert_eq!(traj.len(), 2);
        assert!(traj.actions.is_none() && traj.true_states.is_none());
        assert!(read_trajectory_csv("t,o_2\n0,1\n".as_bytes()).is_err());
        assert!(read_trajectory_csv("t,o_1\n0,x\n".as_bytes()).is_err());
    }

    #[test]
    fn belief_text() {
        assert_eq!(parse_belief("1, 0,0").unwrap().probs(), &[1.0, 0.0, 0.0]);
        assert!(parse_belief("0.5,0.2").is_err());
        assert!(parse_belief("a,b").is_err());
    }

    #[test]
    fn ragged_matrix_rejected() {
        assert!(from_rows(vec![vec![1.0, 2.0], vec![3.0]]).is_err());
    }
}
