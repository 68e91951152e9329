//! Plain CSV and JSON Lines readers and writers for datasets and results.
//!
//! Trial CSV layout: a first row `x,<x1>,...,<xn>` followed by one row
//! `trial_j,<y1>,...,<yn>` per trial. Floats are written in shortest
//! round-trip form, so reading a written file gives back identical values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{MgpError, Result};
use crate::eval::{Histogram, WindowPrediction};
use crate::likelihood::TrialSet;
use crate::mcmc::{ChainOutput, PosteriorSample};
use crate::partition::PartitionTree;

fn parse_f64(field: &str, row: usize) -> Result<f64> {
    field.trim().parse().map_err(|_| {
        MgpError::InvalidInput(format!("row {row}: cannot parse {field:?} as a number"))
    })
}

pub fn write_trials<W: Write>(w: W, data: &TrialSet) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut row = vec!["x".to_string()];
    row.extend(data.locs().iter().map(f64::to_string));
    out.write_record(&row)?;
    for j in 0..data.num_trials() {
        let mut row = vec![format!("trial_{}", j + 1)];
        row.extend(data.matrix().column(j).iter().map(f64::to_string));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trials<R: Read>(r: R) -> Result<TrialSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(r);
    let mut rows = rdr.records();
    let header = rows
        .next()
        .ok_or_else(|| MgpError::InvalidInput("empty trial file".into()))??;
    if header.get(0).map(str::trim) != Some("x") {
        return Err(MgpError::InvalidInput(
            "first row must start with `x`".into(),
        ));
    }
    let locs = header
        .iter()
        .skip(1)
        .map(|f| parse_f64(f, 1))
        .collect::<Result<Vec<_>>>()?;
    let mut trials = Vec::new();
    for (i, rec) in rows.enumerate() {
        let rec = rec?;
        if rec.len() != locs.len() + 1 {
            return Err(MgpError::InvalidInput(format!(
                "row {} has {} values, expected {}",
                i + 2,
                rec.len().saturating_sub(1),
                locs.len()
            )));
        }
        trials.push(
            rec.iter()
                .skip(1)
                .map(|f| parse_f64(f, i + 2))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    TrialSet::new(locs, trials)
}

pub fn save_trials(path: &Path, data: &TrialSet) -> Result<()> {
    write_trials(BufWriter::new(File::create(path)?), data)
}

pub fn load_trials(path: &Path) -> Result<TrialSet> {
    read_trials(BufReader::new(File::open(path)?))
}

/// One JSON object per line.
pub fn write_samples<W: Write>(mut w: W, samples: &[PosteriorSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples<R: Read>(r: R) -> Result<Vec<PosteriorSample>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: PosteriorSample = serde_json::from_str(&line)
            .map_err(|e| MgpError::InvalidInput(format!("sample line {}: {e}", i + 1)))?;
        s.tree.validate()?;
        out.push(s);
    }
    if out.is_empty() {
        return Err(MgpError::InvalidInput("no samples".into()));
    }
    Ok(out)
}

/// `iteration,chain,log_likelihood` for every iteration of every chain.
pub fn write_trace<W: Write>(w: W, chains: &[ChainOutput]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iteration", "chain", "log_likelihood"])?;
    for (c, chain) in chains.iter().enumerate() {
        for (i, ll) in chain.trace.iter().enumerate() {
            out.write_record([i.to_string(), c.to_string(), ll.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Headerless dense matrix, one row per line.
pub fn write_matrix<W: Write>(w: W, m: &DMatrix<f64>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for i in 0..m.nrows() {
        out.write_record(m.row(i).iter().map(f64::to_string))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_histogram<W: Write>(w: W, h: &Histogram) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["lo", "hi", "mass"])?;
    for (b, m) in h.mass.iter().enumerate() {
        out.write_record([
            h.edges[b].to_string(),
            h.edges[b + 1].to_string(),
            m.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// `level,boundary` for every non-null cut of `tree`.
pub fn write_boundaries<W: Write>(w: W, tree: &PartitionTree) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["level", "boundary"])?;
    for (level, cut) in tree.level_cuts() {
        if let Some(z) = cut {
            out.write_record([level.to_string(), z.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `trial,index,x,mean,variance` for one window prediction per target
/// trial; trials and indices are 1-based.
pub fn write_predictions<W: Write>(w: W, preds: &[WindowPrediction], locs: &[f64]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["trial", "index", "x", "mean", "variance"])?;
    for (t, p) in preds.iter().enumerate() {
        for (k, &i) in p.indices.iter().enumerate() {
            out.write_record([
                (t + 1).to_string(),
                (i + 1).to_string(),
                locs[i].to_string(),
                p.mean[k].to_string(),
                p.variance[k].to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}
