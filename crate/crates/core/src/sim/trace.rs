//! Recorded closed-loop signals and their CSV form.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use csv::{ReaderBuilder, Terminator, WriterBuilder};

use super::config::ControllerKind;
use crate::error::{Error, Result};
use crate::observers::CascadeConfig;

/// Run-level quantities the decay envelopes need. Sups are taken over every
/// integration step, not only over recorded rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceMeta {
    pub controller: ControllerKind,
    pub n: usize,
    pub omega_c: f64,
    pub omega_in: f64,
    pub cascade: Option<CascadeConfig>,
    pub dt: f64,
    pub setpoint: f64,
    pub time_scale: f64,
    /// `‖ρ‖∞`.
    pub rho_sup: f64,
    /// `‖Ḟ‖∞` of the inner generalized disturbance.
    pub f_dot_sup: f64,
    /// `‖x̃_{n+1}‖∞`.
    pub inner_residual_sup: f64,
    pub x_tilde0_norm: f64,
    /// `‖z̃_i(0)‖` for each cascade level.
    pub z_tilde0_norms: Vec<f64>,
    pub eps0_norm: f64,
}

/// Uniformly sampled closed-loop record. Observer error columns hold NaN
/// when the controller has no such observer.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub t: Vec<f64>,
    pub r: Vec<f64>,
    pub y_plant: Vec<f64>,
    pub y_meas: Vec<f64>,
    pub u_ctl: Vec<f64>,
    pub e: Vec<f64>,
    /// `n+1` columns.
    pub x_tilde: Vec<Vec<f64>>,
    /// `n+1` columns.
    pub z_tilde_p: Vec<Vec<f64>>,
    /// `n` columns.
    pub eps: Vec<Vec<f64>>,
    pub meta: Option<TraceMeta>,
}

impl SimulationTrace {
    pub fn with_capacity(n: usize, rows: usize) -> Self {
        let col = || Vec::with_capacity(rows);
        Self {
            t: col(),
            r: col(),
            y_plant: col(),
            y_meas: col(),
            u_ctl: col(),
            e: col(),
            x_tilde: (0..=n).map(|_| col()).collect(),
            z_tilde_p: (0..=n).map(|_| col()).collect(),
            eps: (0..n).map(|_| col()).collect(),
            meta: None,
        }
    }

    pub fn n(&self) -> usize {
        self.eps.len()
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Sample interval of the recorded grid.
    pub fn sample_dt(&self) -> Option<f64> {
        (self.t.len() >= 2).then(|| (self.t[self.t.len() - 1] - self.t[0]) / (self.t.len() - 1) as f64)
    }

    /// Index of the first row at or after `t0`.
    pub fn index_at(&self, t0: f64) -> usize {
        self.t.partition_point(|&t| t < t0 - 1e-12)
    }

    pub fn header(n: usize) -> Vec<String> {
        let mut h: Vec<String> = ["t", "r", "y_plant", "y_meas", "u_ctl", "e"].map(String::from).to_vec();
        h.extend((1..=n + 1).map(|j| format!("xt{j}")));
        h.extend((1..=n + 1).map(|j| format!("zt{j}")));
        h.extend((1..=n).map(|j| format!("eps{j}")));
        h
    }

    fn columns(&self) -> Vec<&Vec<f64>> {
        let mut c = vec![&self.t, &self.r, &self.y_plant, &self.y_meas, &self.u_ctl, &self.e];
        c.extend(self.x_tilde.iter());
        c.extend(self.z_tilde_p.iter());
        c.extend(self.eps.iter());
        c
    }

    /// Column by header name.
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        let h = Self::header(self.n());
        h.iter().position(|c| c == name).map(|i| self.columns()[i].as_slice())
    }

    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = WriterBuilder::new().terminator(Terminator::Any(b'\n')).from_writer(w);
        wr.write_record(Self::header(self.n()))?;
        let cols = self.columns();
        let mut row: Vec<String> = Vec::with_capacity(cols.len());
        for i in 0..self.len() {
            row.clear();
            // `{}` on f64 prints the shortest string that round-trips.
            row.extend(cols.iter().map(|c| format!("{}", c[i])));
            wr.write_record(&row)?;
        }
        wr.flush().map_err(|source| Error::Io { path: "<trace>".into(), source })?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        self.write_csv_to(BufWriter::new(f))
    }

    pub fn read_csv_from<R: Read>(r: R) -> Result<Self> {
        let table = CsvTable::read_from(r)?;
        let n = table
            .headers
            .iter()
            .filter(|h| h.starts_with("eps"))
            .count();
        if table.headers != Self::header(n) {
            return Err(Error::Config(format!("unexpected trace header: {}", table.headers.join(","))));
        }
        let mut cols = table.columns;
        let eps = cols.split_off(6 + 2 * (n + 1));
        let z_tilde_p = cols.split_off(6 + n + 1);
        let x_tilde = cols.split_off(6);
        let [t, r, y_plant, y_meas, u_ctl, e]: [Vec<f64>; 6] =
            cols.try_into().map_err(|_| Error::Config("trace is missing base columns".into()))?;
        Ok(Self {
            t,
            r,
            y_plant,
            y_meas,
            u_ctl,
            e,
            x_tilde,
            z_tilde_p,
            eps,
            meta: None,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::read_csv_from(BufReader::new(f))
    }
}

/// Numeric CSV with a header row, stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut rd = ReaderBuilder::new().has_headers(true).from_reader(r);
        let headers: Vec<String> = rd.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let mut columns = vec![Vec::new(); headers.len()];
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            for (i, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Config(format!("row {}: column `{}` is not a number: {field:?}", line + 2, headers[i]))
                })?;
                columns[i].push(v);
            }
        }
        Ok(Self { headers, columns })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::read_from(BufReader::new(f))
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.headers
            .iter()
            .position(|h| h == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::Config(format!("no column `{name}`; available: {}", self.headers.join(","))))
    }
}
