//! CSV and JSON artifacts.
//!
//! Floats are written with Rust's shortest round-trip formatting, `.` as
//! decimal separator and LF line endings, so files compare byte for byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::fbsde::EquilibriumSolution;
use crate::lattice::{AdaptedProcess, ScenarioLattice};
use crate::mfg::MkvSolution;

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(File::create(path)?)))
}

fn refs(v: &[AdaptedProcess]) -> Vec<&AdaptedProcess> {
    v.iter().collect()
}

/// Generic table writer.
pub fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows `(step, node, agent, coordinate, value)` for a family of per-agent
/// processes.
pub fn write_processes(path: &Path, processes: &[&AdaptedProcess]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["step", "node", "agent", "coordinate", "value"])?;
    for (agent, p) in processes.iter().enumerate() {
        let dim = p.dim().max(1);
        for k in 0..p.steps() {
            for (j, v) in p.step(k).iter().enumerate() {
                w.write_record([
                    k.to_string(),
                    (j / dim).to_string(),
                    agent.to_string(),
                    (j % dim).to_string(),
                    fmt_f64(*v),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per node: `step, node, probability`, then one column per
/// component of each named process.
pub fn write_lattice_dump(path: &Path, lattice: &ScenarioLattice, processes: &[(&str, &AdaptedProcess)]) -> Result<()> {
    for (name, p) in processes {
        if p.steps() != lattice.steps() + 1
            || (0..p.steps()).any(|k| p.step(k).len() != lattice.node_count(k) * p.dim())
        {
            return Err(crate::Error::shape(format!("process `{name}` is not stored per node on this lattice")));
        }
    }
    let mut header = vec!["step".to_string(), "node".to_string(), "probability".to_string()];
    for (name, p) in processes {
        header.extend((0..p.dim()).map(|c| format!("{name}[{c}]")));
    }
    let mut w = writer(path)?;
    w.write_record(&header)?;
    for k in 0..=lattice.steps() {
        let prob = fmt_f64(lattice.node_probability(k));
        for node in 0..lattice.node_count(k) {
            let mut row = vec![k.to_string(), node.to_string(), prob.clone()];
            for (_, p) in processes {
                row.extend(p.at(k, node).iter().map(|v| fmt_f64(*v)));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Writes `X`, `Y`, `Z0`, `Zij` and `phi` CSVs into `dir` with `prefix`;
/// returns the file names.
pub fn write_equilibrium(dir: &Path, prefix: &str, s: &EquilibriumSolution) -> Result<Vec<String>> {
    let files = [
        ("X", refs(&s.x)),
        ("Y", refs(&s.y)),
        ("Z0", refs(&s.z0)),
        ("Zij", refs(&s.zij)),
        ("phi", vec![&s.phi]),
    ];
    let mut names = Vec::new();
    for (kind, procs) in files {
        let name = format!("{prefix}-{kind}.csv");
        write_processes(&dir.join(&name), &procs)?;
        names.push(name);
    }
    Ok(names)
}

/// Representative processes (one "agent" per initial atom) and the price
/// keyed by common-noise prefix.
pub fn write_mkv(dir: &Path, prefix: &str, s: &MkvSolution) -> Result<Vec<String>> {
    let files = [("X", refs(&s.x)), ("Y", refs(&s.y)), ("Z0", refs(&s.z0)), ("Zii", refs(&s.zi))];
    let mut names = Vec::new();
    for (kind, procs) in files {
        let name = format!("{prefix}-{kind}.csv");
        write_processes(&dir.join(&name), &procs)?;
        names.push(name);
    }
    let name = format!("{prefix}-phi_mfg.csv");
    let n = s.securities();
    write_table(
        &dir.join(&name),
        &["step", "group", "coordinate", "value"],
        s.phi_groups.iter().enumerate().flat_map(|(k, g)| {
            g.iter()
                .enumerate()
                .map(move |(j, v)| vec![k.to_string(), (j / n).to_string(), (j % n).to_string(), fmt_f64(*v)])
        }),
    )?;
    names.push(name);
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Measurability;

    #[test]
    fn floats_round_trip_and_lines_end_in_lf() {
        let l = ScenarioLattice::new(1, 1, 1, 0, 1.0).unwrap();
        let p = AdaptedProcess::from_fn(&l, 1, Measurability::Full, |k, node, out| {
            out[0] = 0.1 + k as f64 / 3.0 + node as f64 * 1e-17;
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_processes(&path, &[&p]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains('\r'));
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        let back: Vec<f64> = rdr.records().map(|r| r.unwrap()[4].parse().unwrap()).collect();
        let want: Vec<f64> = (0..=1).flat_map(|k| p.step(k).to_vec()).collect();
        assert_eq!(back, want);
    }

    #[test]
    fn lattice_dump_lists_every_node() {
        let l = ScenarioLattice::new(2, 1, 1, 0, 1.0).unwrap();
        let w = AdaptedProcess::from_fn(&l, 1, Measurability::Full, |k, node, out| out[0] = l.brownian_level(k, node, 0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        write_lattice_dump(&path, &l, &[("W", &w)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,node,probability,W[0]");
        assert_eq!(lines.len(), 1 + 1 + 2 + 4);
        assert!(lines[2].starts_with("1,0,0.5,"));
    }
}
