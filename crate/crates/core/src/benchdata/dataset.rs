use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Iv,
    Ivoc,
    Pcl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl DatasetMeta {
    pub fn new(generator: &str, seed: u64, config: serde_json::Value) -> Self {
        DatasetMeta {
            generator: generator.to_string(),
            seed,
            config,
        }
    }
}

/// Column-grouped samples. `o` is present only for IV-OC and `w` only for PCL.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub setting: Setting,
    pub x: Matrix,
    pub z: Matrix,
    pub y: Matrix,
    pub o: Option<Matrix>,
    pub w: Option<Matrix>,
    /// Structural function values at each row, when known.
    pub truth: Option<Vec<f64>>,
    pub meta: DatasetMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    setting: Setting,
    meta: DatasetMeta,
    columns: Vec<(String, usize)>,
    truth: bool,
}

impl Dataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        setting: Setting,
        x: Matrix,
        z: Matrix,
        y: Matrix,
        o: Option<Matrix>,
        w: Option<Matrix>,
        truth: Option<Vec<f64>>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let d = Dataset {
            setting,
            x,
            z,
            y,
            o,
            w,
            truth,
            meta,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.setting, &self.o, &self.w) {
            (Setting::Iv, None, None) | (Setting::Ivoc, Some(_), None) | (Setting::Pcl, None, Some(_)) => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "{:?} dataset has the wrong optional columns",
                    self.setting
                )))
            }
        }
        let n = self.x.rows();
        for (name, m) in self.columns() {
            if m.rows() != n {
                return Err(Error::dim(
                    "Dataset",
                    format!("column {name} has {} rows, x has {n}", m.rows()),
                ));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("dataset column {name}")));
            }
        }
        if let Some(t) = &self.truth {
            if t.len() != n {
                return Err(Error::dim("Dataset", format!("truth has {} rows, x has {n}", t.len())));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn columns(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![("x", &self.x), ("z", &self.z)];
        if let Some(o) = &self.o {
            out.push(("o", o));
        }
        if let Some(w) = &self.w {
            out.push(("w", w));
        }
        out.push(("y", &self.y));
        out
    }

    pub fn y_vec(&self) -> Vec<f64> {
        self.y.col(0)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            setting: self.setting,
            x: self.x.select_rows(idx),
            z: self.z.select_rows(idx),
            y: self.y.select_rows(idx),
            o: self.o.as_ref().map(|m| m.select_rows(idx)),
            w: self.w.as_ref().map(|m| m.select_rows(idx)),
            truth: self.truth.as_ref().map(|t| idx.iter().map(|&i| t[i]).collect()),
            meta: self.meta.clone(),
        }
    }

    /// Random disjoint split; the first part gets `round(frac * n)` rows.
    pub fn split(&self, frac: f64, seed: u64) -> (Dataset, Dataset) {
        let perm = SeededRng::new(seed).permutation(self.n());
        let k = ((self.n() as f64) * frac).round() as usize;
        let (a, b) = perm.split_at(k.min(self.n()));
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        (self.select_rows(&a), self.select_rows(&b))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let header = FileHeader {
            setting: self.setting,
            meta: self.meta.clone(),
            columns: self.columns().iter().map(|(n, m)| (n.to_string(), m.cols())).collect(),
            truth: self.truth.is_some(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        let mut w = csv::Writer::from_writer(out);
        let mut names = Vec::new();
        for (name, m) in self.columns() {
            for j in 0..m.cols() {
                names.push(format!("{name}{j}"));
            }
        }
        if self.truth.is_some() {
            names.push("truth".to_string());
        }
        w.write_record(&names)?;
        let cols = self.columns();
        let mut rec = Vec::with_capacity(names.len());
        for i in 0..self.n() {
            rec.clear();
            for (_, m) in &cols {
                rec.extend(m.row(i).iter().map(|v| v.to_string()));
            }
            if let Some(t) = &self.truth {
                rec.push(t[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Dataset> {
        let mut reader = BufReader::new(input);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: FileHeader = serde_json::from_str(line.trim_end())?;
        let mut csv_reader = csv::Reader::from_reader(reader);
        let width: usize = header.columns.iter().map(|(_, d)| d).sum::<usize>() + usize::from(header.truth);
        let mut data: Vec<Vec<f64>> = vec![Vec::new(); header.columns.len()];
        let mut truth = Vec::new();
        let mut n = 0;
        for rec in csv_reader.records() {
            let rec = rec?;
            if rec.len() != width {
                return Err(Error::Format(format!(
                    "row {n} has {} fields, expected {width}",
                    rec.len()
                )));
            }
            let mut it = rec.iter();
            for (c, (_, dim)) in header.columns.iter().enumerate() {
                for _ in 0..*dim {
                    data[c].push(parse_f64(it.next().unwrap(), n)?);
                }
            }
            if header.truth {
                truth.push(parse_f64(it.next().unwrap(), n)?);
            }
            n += 1;
        }
        let mut take = |name: &str| -> Result<Option<Matrix>> {
            match header.columns.iter().position(|(c, _)| c == name) {
                Some(i) => Ok(Some(Matrix::from_vec(
                    n,
                    header.columns[i].1,
                    std::mem::take(&mut data[i]),
                )?)),
                None => Ok(None),
            }
        };
        let missing = |c: &str| Error::Format(format!("dataset file lacks column {c}"));
        let x = take("x")?.ok_or_else(|| missing("x"))?;
        let z = take("z")?.ok_or_else(|| missing("z"))?;
        let y = take("y")?.ok_or_else(|| missing("y"))?;
        let o = take("o")?;
        let w = take("w")?;
        Dataset::new(
            header.setting,
            x,
            z,
            y,
            o,
            w,
            header.truth.then_some(truth),
            header.meta,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::read_from(std::fs::File::open(path)?)
    }
}

fn parse_f64(s: &str, row: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Format(format!("row {row}: cannot parse {s:?}: {e}")))
}

/// Mean squared difference.
pub fn oos_mse(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::dim(
            "oos_mse",
            format!("{} predictions vs {} truth values", predictions.len(), truth.len()),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("oos_mse of empty vectors".into()));
    }
    Ok(predictions.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / predictions.len() as f64)
}
