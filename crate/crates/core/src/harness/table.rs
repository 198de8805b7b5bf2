//! Versioned CSV tables. Each file opens with a comment line
//! `# rcmae-lab v1 schema=<name> key=value ...` naming its fixed column set.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{LabError, Result};

pub const VERSION: &str = "v1";
const MAGIC: &str = "# rcmae-lab";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Schema {
    /// Per-step identity deviation and bound sides of a plain-SGD run.
    LinearTrace,
    /// Per-step, per-case means of the gradient probe.
    Probe,
    /// Per-step RC-MAE training metrics.
    Training,
    /// Distance of the plain-SGD iterate to the covariance solution.
    Covariance,
    /// The Monte-Carlo covariance solution itself (one row).
    CovarianceFit,
}

impl Schema {
    pub const ALL: [Schema; 5] = [
        Schema::LinearTrace,
        Schema::Probe,
        Schema::Training,
        Schema::Covariance,
        Schema::CovarianceFit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Schema::LinearTrace => "linear_trace",
            Schema::Probe => "probe",
            Schema::Training => "training",
            Schema::Covariance => "covariance",
            Schema::CovarianceFit => "covariance_fit",
        }
    }

    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Schema::LinearTrace => &[
                "step",
                "loss_r",
                "loss_c",
                "norm_grad",
                "prop1_delta",
                "cons_lhs",
                "cons_rhs",
                "cons_holds",
                "recon_lhs",
                "recon_rhs",
                "recon_holds",
            ],
            Schema::Probe => &[
                "step",
                "case",
                "norm_recon",
                "norm_cons",
                "cos_prev_full_vs_cons",
                "cos_recon_vs_cons",
                "input_similarity",
            ],
            Schema::Training => &[
                "step",
                "loss_r",
                "loss_c",
                "norm_recon",
                "norm_cons",
                "norm_total",
                "cos_recon_vs_cons",
            ],
            Schema::Covariance => &["epoch", "step", "loss_r", "dist_iterate", "dist_average", "norm_s_star"],
            Schema::CovarianceFit => &["samples", "residual_abs", "residual_rel", "pinv_truncated", "norm_s_star"],
        }
    }

    fn from_name(name: &str) -> Option<Schema> {
        Schema::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// A CSV table held as the exact strings that will be (or were) written.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub schema: Schema,
    /// Header tags after the schema name, e.g. `experiment`, `seed`, `variant`.
    pub tags: BTreeMap<String, String>,
    pub rows: Vec<Vec<String>>,
}

/// Shortest round-trip form; exponent notation for very small or large values.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

impl Table {
    pub fn new(schema: Schema) -> Self {
        Self {
            schema,
            tags: BTreeMap::new(),
            rows: Vec::new(),
        }
    }

    pub fn tag(mut self, key: &str, value: impl ToString) -> Self {
        self.tags.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.schema.columns().len());
        self.rows.push(row);
    }

    fn header_line(&self) -> String {
        let mut line = format!("{MAGIC} {VERSION} schema={}", self.schema.name());
        for (k, v) in &self.tags {
            line.push_str(&format!(" {k}={v}"));
        }
        line
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.header_line())?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(self.schema.columns())?;
        for row in &self.rows {
            csv.write_record(row)?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to memory");
        out
    }

    /// Parses a table, checking the header comment and every column name.
    pub fn read<R: std::io::Read>(r: R, origin: &str) -> Result<Self> {
        let schema_err = |column: &str| LabError::Schema {
            path: origin.to_string(),
            column: column.to_string(),
        };
        let mut reader = BufReader::new(r);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let mut words = first.trim_end().split(' ');
        if words.next() != Some("#") || words.next() != Some("rcmae-lab") {
            return Err(schema_err("<header comment>"));
        }
        if words.next() != Some(VERSION) {
            return Err(schema_err("<version>"));
        }
        let mut schema = None;
        let mut tags = BTreeMap::new();
        for w in words {
            let (k, v) = w.split_once('=').ok_or_else(|| schema_err(w))?;
            if k == "schema" {
                schema = Some(Schema::from_name(v).ok_or_else(|| schema_err(v))?);
            } else {
                tags.insert(k.to_string(), v.to_string());
            }
        }
        let schema = schema.ok_or_else(|| schema_err("<schema>"))?;
        let mut csv = csv::Reader::from_reader(reader);
        let header = csv.headers()?.clone();
        let expected = schema.columns();
        for i in 0..expected.len().max(header.len()) {
            match (expected.get(i), header.get(i)) {
                (Some(e), Some(h)) if *e == h => {}
                (Some(e), _) => return Err(schema_err(e)),
                (None, Some(h)) => return Err(schema_err(h)),
                (None, None) => unreachable!(),
            }
        }
        let rows = csv
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        Ok(Self { schema, tags, rows })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(f, &path.display().to_string())
    }

    fn index(&self, column: &str) -> Result<usize> {
        self.schema
            .columns()
            .iter()
            .position(|c| *c == column)
            .ok_or_else(|| LabError::Schema {
                path: self.schema.name().to_string(),
                column: column.to_string(),
            })
    }

    /// Numeric values of `column`, in row order.
    pub fn numbers(&self, column: &str) -> Result<Vec<f64>> {
        let i = self.index(column)?;
        self.rows
            .iter()
            .map(|r| {
                r[i].parse::<f64>().map_err(|_| LabError::Schema {
                    path: self.schema.name().to_string(),
                    column: column.to_string(),
                })
            })
            .collect()
    }

    pub fn strings(&self, column: &str) -> Result<Vec<&str>> {
        let i = self.index(column)?;
        Ok(self.rows.iter().map(|r| r[i].as_str()).collect())
    }
}
