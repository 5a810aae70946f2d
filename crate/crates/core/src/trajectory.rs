//! Named multi-channel time series and their CSV form.
//!
//! The CSV layout is one header row `t,<channel>,...` followed by one row
//! per sample. Every consumer in the crate (system identification, state
//! selection, reports) reads the files the simulator writes.

use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub name: String,
    channels: Vec<String>,
    time: Vec<f64>,
    /// Column-major: `data[channel][sample]`.
    data: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(name: impl Into<String>, channels: Vec<String>) -> Self {
        let data = vec![Vec::new(); channels.len()];
        Self {
            name: name.into(),
            channels,
            time: Vec::new(),
            data,
        }
    }

    pub fn with_capacity(name: impl Into<String>, channels: Vec<String>, cap: usize) -> Self {
        let data = vec![Vec::with_capacity(cap); channels.len()];
        Self {
            name: name.into(),
            channels,
            time: Vec::with_capacity(cap),
            data,
        }
    }

    pub fn push(&mut self, t: f64, row: &[f64]) -> Result<()> {
        if row.len() != self.channels.len() {
            return Err(Error::Dimension(format!(
                "row has {} values, trajectory `{}` has {} channels",
                row.len(),
                self.name,
                self.channels.len()
            )));
        }
        self.time.push(t);
        for (col, v) in self.data.iter_mut().zip(row) {
            col.push(*v);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn time(&self) -> &[f64] {
        &self.time
    }

    pub fn index_of(&self, channel: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == channel)
    }

    pub fn channel(&self, channel: &str) -> Result<&[f64]> {
        self.index_of(channel)
            .map(|i| self.data[i].as_slice())
            .ok_or_else(|| Error::UnknownChannel(channel.to_string()))
    }

    pub fn column(&self, index: usize) -> &[f64] {
        &self.data[index]
    }

    /// Sample spacing inferred from the first two timestamps.
    pub fn dt(&self) -> Option<f64> {
        (self.time.len() >= 2).then(|| self.time[1] - self.time[0])
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        self.data.iter().map(|c| c[k]).collect()
    }

    /// Copy of the listed channels, in the listed order.
    pub fn select(&self, channels: &[String]) -> Result<Trajectory> {
        let idx: Vec<usize> = channels
            .iter()
            .map(|c| self.index_of(c).ok_or_else(|| Error::UnknownChannel(c.clone())))
            .collect::<Result<_>>()?;
        Ok(Trajectory {
            name: self.name.clone(),
            channels: channels.to_vec(),
            time: self.time.clone(),
            data: idx.iter().map(|&i| self.data[i].clone()).collect(),
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = Vec::with_capacity(self.channels.len() + 1);
        header.push("t".to_string());
        header.extend(self.channels.iter().cloned());
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for k in 0..self.len() {
            record.clear();
            record.push(format_float(self.time[k]));
            record.extend(self.data.iter().map(|c| format_float(c[k])));
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Parse a trajectory CSV. Rejects ragged rows, non-numeric or
    /// non-finite cells, duplicate channel names and non-increasing time.
    pub fn read_csv<R: Read>(reader: R, name: impl Into<String>) -> Result<Trajectory> {
        let name = name.into();
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.is_empty() || &header[0] != "t" {
            return Err(Error::Config(format!(
                "trajectory `{name}`: first column must be `t`"
            )));
        }
        let channels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        for (i, c) in channels.iter().enumerate() {
            if c.is_empty() || c == "t" || channels[..i].contains(c) {
                return Err(Error::Config(format!(
                    "trajectory `{name}`: bad or duplicate channel name `{c}`"
                )));
            }
        }
        let mut traj = Trajectory::new(name.clone(), channels);
        let mut row = vec![0.0; traj.channels.len()];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Config(format!(
                    "trajectory `{name}`: row {} has {} fields, expected {}",
                    line + 1,
                    rec.len(),
                    header.len()
                )));
            }
            let t = parse_cell(&rec[0], &name, line)?;
            if let Some(&prev) = traj.time.last() {
                if t <= prev {
                    return Err(Error::Config(format!(
                        "trajectory `{name}`: time is not increasing at row {}",
                        line + 1
                    )));
                }
            }
            for (slot, cell) in row.iter_mut().zip(rec.iter().skip(1)) {
                *slot = parse_cell(cell, &name, line)?;
            }
            traj.push(t, &row)?;
        }
        Ok(traj)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Trajectory> {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Trajectory::read_csv(std::io::BufReader::new(file), name)
    }
}

fn parse_cell(cell: &str, name: &str, line: usize) -> Result<f64> {
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Config(format!(
            "trajectory `{name}`: row {} has a non-numeric cell `{cell}`",
            line + 1
        ))),
    }
}

/// Shortest representation that parses back to the same value, so logs are
/// byte-stable across runs.
pub(crate) fn format_float(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else {
        format!("{v}")
    }
}
