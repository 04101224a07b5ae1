//! Dataset access: CSV streaming, seeded shuffling, intercept injection.
//!
//! Files are read in two ways. [`open_csv`] streams rows in file order.
//! [`IndexedCsv`] records the byte offset of every data row in one pass and
//! then serves rows in any order, so a shuffled pass costs one `u64` per row
//! rather than a shuffled copy of the data. Gzip input (`.gz`) is inflated to
//! a temporary file before indexing.

use std::fs::File;
use std::io::{self, BufReader, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use flate2::read::MultiGzDecoder;
use serde::Serialize;
use tempfile::NamedTempFile;

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, uniform_below};
use crate::sgd::Observation;

/// A column addressed by header name or by zero-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Name(String),
    Index(usize),
}

impl From<&str> for ColumnRef {
    fn from(s: &str) -> Self {
        ColumnRef::Name(s.to_string())
    }
}

impl From<usize> for ColumnRef {
    fn from(i: usize) -> Self {
        ColumnRef::Index(i)
    }
}

/// Which columns make up `y` and `x`.
///
/// An empty feature list means "every column except the response".
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetSchema {
    pub response: ColumnRef,
    pub features: Vec<ColumnRef>,
    pub add_intercept: bool,
}

impl DatasetSchema {
    pub fn new(response: impl Into<ColumnRef>, features: Vec<ColumnRef>, add_intercept: bool) -> Self {
        Self {
            response: response.into(),
            features,
            add_intercept,
        }
    }

    /// Resolve column references against a header row.
    pub fn resolve(&self, header: &[String]) -> Result<ResolvedSchema> {
        let lookup = |c: &ColumnRef| -> Result<usize> {
            match c {
                ColumnRef::Name(name) => header
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::MissingColumn(name.clone())),
                ColumnRef::Index(i) if *i < header.len() => Ok(*i),
                ColumnRef::Index(i) => Err(Error::MissingColumn(format!("#{i}"))),
            }
        };
        let response = lookup(&self.response)?;
        let features: Vec<usize> = if self.features.is_empty() {
            (0..header.len()).filter(|&i| i != response).collect()
        } else {
            self.features.iter().map(lookup).collect::<Result<_>>()?
        };
        if features.contains(&response) {
            return Err(Error::InvalidConfig(format!(
                "response column {:?} is also listed as a feature",
                header[response]
            )));
        }
        if features.is_empty() && !self.add_intercept {
            return Err(Error::InvalidConfig("schema has no regressors".into()));
        }
        let mut names = Vec::with_capacity(features.len() + 1);
        if self.add_intercept {
            names.push("(intercept)".to_string());
        }
        names.extend(features.iter().map(|&i| header[i].clone()));
        Ok(ResolvedSchema {
            response,
            response_name: header[response].clone(),
            features,
            add_intercept: self.add_intercept,
            width: header.len(),
            names,
        })
    }
}

/// Schema bound to concrete column positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ResolvedSchema {
    pub response: usize,
    pub response_name: String,
    pub features: Vec<usize>,
    pub add_intercept: bool,
    pub width: usize,
    /// Regressor names in `x` order, intercept first when present.
    pub names: Vec<String>,
}

impl ResolvedSchema {
    pub fn dim(&self) -> usize {
        self.features.len() + usize::from(self.add_intercept)
    }

    fn parse_field(&self, field: &str, line: u64, col: usize) -> Result<f64> {
        let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
            row: line,
            column: self.column_label(col),
            message: format!("not a number: {field:?}"),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                row: line,
                column: self.column_label(col),
                message: format!("non-finite value {field:?}"),
            });
        }
        Ok(v)
    }

    fn column_label(&self, col: usize) -> String {
        if col == self.response {
            return self.response_name.clone();
        }
        let offset = usize::from(self.add_intercept);
        self.features
            .iter()
            .position(|&f| f == col)
            .map(|p| self.names[p + offset].clone())
            .unwrap_or_else(|| format!("#{col}"))
    }

    /// Build an observation from one record; `line` is the 1-based file line.
    pub fn observation<'a, I>(&self, fields: I, line: u64) -> Result<Observation>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let fields: Vec<&str> = fields.into_iter().collect();
        if fields.len() != self.width {
            return Err(Error::RaggedRow {
                row: line,
                expected: self.width,
                found: fields.len(),
            });
        }
        let y = self.parse_field(fields[self.response], line, self.response)?;
        let mut x = Vec::with_capacity(self.dim());
        if self.add_intercept {
            x.push(1.0);
        }
        for &c in &self.features {
            x.push(self.parse_field(fields[c], line, c)?);
        }
        Ok(Observation { x, y })
    }
}

/// Row-major in-memory dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidConfig("dataset needs at least one regressor".into()));
        }
        Ok(Self {
            d,
            x: Vec::new(),
            y: Vec::new(),
        })
    }

    pub fn with_capacity(d: usize, n: usize) -> Result<Self> {
        let mut ds = Self::new(d)?;
        ds.x.reserve(n * d);
        ds.y.reserve(n);
        Ok(ds)
    }

    pub fn from_observations<I>(d: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = Result<Observation>>,
    {
        let mut ds = Self::new(d)?;
        for obs in rows {
            let obs = obs?;
            ds.push(&obs.x, obs.y)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, x: &[f64], y: f64) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: x.len(),
            });
        }
        self.x.extend_from_slice(x);
        self.y.push(y);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> (&[f64], f64) {
        (&self.x[i * self.d..(i + 1) * self.d], self.y[i])
    }

    pub fn response(&self) -> &[f64] {
        &self.y
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.x.chunks_exact(self.d).zip(self.y.iter().copied())
    }

    /// Copy of the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset {
            d: self.d,
            x: Vec::with_capacity(indices.len() * self.d),
            y: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            let (x, y) = self.row(i);
            out.x.extend_from_slice(x);
            out.y.push(y);
        }
        out
    }

    /// Rows in the order given by `order`.
    pub fn iter_order<'a>(&'a self, order: &'a [usize]) -> impl Iterator<Item = (&'a [f64], f64)> + 'a {
        order.iter().map(move |&i| self.row(i))
    }

    /// Rows as owned observations in a seeded shuffled order.
    pub fn shuffled_stream(&self, seed: u64) -> impl Iterator<Item = Result<Observation>> + '_ {
        shuffled_indices(self.len(), seed).into_iter().map(move |i| {
            let (x, y) = self.row(i);
            Ok(Observation { x: x.to_vec(), y })
        })
    }

    /// Write as CSV with header `y,<names...>`; the regressors are written verbatim.
    pub fn write_csv(&self, path: &Path, names: &[String]) -> Result<()> {
        if names.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: names.len(),
            });
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["y".to_string()];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        let mut rec = Vec::with_capacity(self.d + 1);
        for (x, y) in self.rows() {
            rec.clear();
            rec.push(y.to_string());
            rec.extend(x.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Seeded Fisher-Yates permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(seed);
    for i in (1..n).rev() {
        let j = uniform_below(&mut rng, i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    perm
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn open_reader(path: &Path) -> Result<Box<dyn Read + Send>> {
    let file = File::open(path)?;
    if is_gzip(path) {
        Ok(Box::new(MultiGzDecoder::new(BufReader::new(file))))
    } else {
        Ok(Box::new(file))
    }
}

fn csv_builder() -> csv::ReaderBuilder {
    let mut b = csv::ReaderBuilder::new();
    b.has_headers(true).flexible(true).trim(csv::Trim::All);
    b
}

/// Stream of observations in file order.
pub struct CsvStream {
    reader: csv::Reader<Box<dyn Read + Send>>,
    schema: ResolvedSchema,
    record: csv::StringRecord,
}

impl CsvStream {
    pub fn schema(&self) -> &ResolvedSchema {
        &self.schema
    }
}

impl Iterator for CsvStream {
    type Item = Result<Observation>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.reader.read_record(&mut self.record) {
            Ok(false) => None,
            Ok(true) => {
                let line = self.record.position().map_or(0, |p| p.line());
                Some(self.schema.observation(self.record.iter(), line))
            }
            Err(e) => Some(Err(e.into())),
        }
    }
}

/// Open a CSV (optionally `.gz`) file and stream its rows in file order.
pub fn open_csv(path: &Path, schema: &DatasetSchema) -> Result<CsvStream> {
    let mut reader = csv_builder().from_reader(open_reader(path)?);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let schema = schema.resolve(&header)?;
    Ok(CsvStream {
        reader,
        schema,
        record: csv::StringRecord::new(),
    })
}

#[derive(Debug, Clone, PartialEq)]
struct FileStamp {
    len: u64,
    modified: Option<SystemTime>,
}

impl FileStamp {
    fn of(file: &File) -> io::Result<Self> {
        let meta = file.metadata()?;
        Ok(Self {
            len: meta.len(),
            modified: meta.modified().ok(),
        })
    }
}

/// Byte-offset index over the data rows of a CSV file.
pub struct IndexedCsv {
    path: PathBuf,
    file: File,
    stamp: FileStamp,
    schema: ResolvedSchema,
    /// Start of each data row, plus the end of the last one.
    offsets: Vec<u64>,
    lines: Vec<u64>,
    // Keeps the inflated copy of a gzip input alive.
    _inflated: Option<NamedTempFile>,
}

impl IndexedCsv {
    /// Index `path` in one sequential pass, validating every row on the way.
    pub fn build(path: &Path, schema: &DatasetSchema) -> Result<Self> {
        let (data_path, inflated) = if is_gzip(path) {
            let mut tmp = NamedTempFile::new()?;
            io::copy(&mut open_reader(path)?, tmp.as_file_mut())?;
            (tmp.path().to_path_buf(), Some(tmp))
        } else {
            (path.to_path_buf(), None)
        };
        let file = File::open(&data_path)?;
        let stamp = FileStamp::of(&file)?;
        let mut reader = csv_builder().from_reader(BufReader::new(File::open(&data_path)?));
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let resolved = schema.resolve(&header)?;

        let mut offsets = Vec::new();
        let mut lines = Vec::new();
        let mut record = csv::StringRecord::new();
        while reader.read_record(&mut record)? {
            let pos = record.position().expect("csv reader tracks positions");
            resolved.observation(record.iter(), pos.line())?;
            offsets.push(pos.byte());
            lines.push(pos.line());
        }
        offsets.push(reader.position().byte());
        Ok(Self {
            path: path.to_path_buf(),
            file,
            stamp,
            schema: resolved,
            offsets,
            lines,
            _inflated: inflated,
        })
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn schema(&self) -> &ResolvedSchema {
        &self.schema
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn check_unchanged(&self) -> Result<()> {
        let now = FileStamp::of(&self.file)?;
        if now != self.stamp {
            return Err(Error::IndexMismatch {
                path: self.path.clone(),
                detail: format!("length {} -> {}", self.stamp.len, now.len),
            });
        }
        Ok(())
    }

    fn parse_row(&self, row: usize, bytes: &[u8]) -> Result<Observation> {
        let line = self.lines[row];
        let text = std::str::from_utf8(bytes).map_err(|_| Error::IndexMismatch {
            path: self.path.clone(),
            detail: format!("row at line {line} is not valid UTF-8"),
        })?;
        let text = text.trim_matches(['\n', '\r']);
        if text.contains('\n') {
            return Err(Error::IndexMismatch {
                path: self.path.clone(),
                detail: format!("row at line {line} no longer ends where it was indexed"),
            });
        }
        self.schema.observation(text.split(','), line)
    }

    fn read_bytes(&self, row: usize, buf: &mut Vec<u8>) -> Result<()> {
        let start = self.offsets[row];
        let end = self.offsets[row + 1];
        buf.resize((end - start) as usize, 0);
        let mut f = &self.file;
        f.seek(SeekFrom::Start(start))?;
        f.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::IndexMismatch {
                path: self.path.clone(),
                detail: "file truncated".into(),
            },
            _ => e.into(),
        })?;
        Ok(())
    }

    /// Read data row `row` (zero-based, file order).
    pub fn read_row(&self, row: usize) -> Result<Observation> {
        let mut buf = Vec::new();
        self.read_bytes(row, &mut buf)?;
        self.parse_row(row, &buf)
    }

    /// Rows at `indices` collected into memory.
    pub fn load(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::from_observations(self.schema.dim(), self.ordered(indices.to_vec()))
    }

    /// Stream rows in the given order.
    pub fn ordered(&self, order: Vec<usize>) -> OrderedRows<'_> {
        OrderedRows {
            index: self,
            order,
            pos: 0,
            window: Vec::new(),
            window_pos: 0,
            buf: Vec::new(),
        }
    }

    /// Stream every row once in a seeded shuffled order.
    pub fn shuffled(&self, seed: u64) -> OrderedRows<'_> {
        self.ordered(shuffled_indices(self.len(), seed))
    }
}

const READ_AHEAD: usize = 256;

/// Rows of an [`IndexedCsv`] in a caller-chosen order, read through a bounded
/// window that is fetched in file-offset order.
pub struct OrderedRows<'a> {
    index: &'a IndexedCsv,
    order: Vec<usize>,
    pos: usize,
    window: Vec<Option<Result<Observation>>>,
    window_pos: usize,
    buf: Vec<u8>,
}

impl OrderedRows<'_> {
    fn refill(&mut self) -> Result<()> {
        self.index.check_unchanged()?;
        let end = (self.pos + READ_AHEAD).min(self.order.len());
        let chunk = &self.order[self.pos..end];
        let mut by_offset: Vec<(usize, usize)> = chunk.iter().copied().enumerate().collect();
        by_offset.sort_unstable_by_key(|&(_, row)| row);
        self.window.clear();
        self.window.resize_with(chunk.len(), || None);
        for (slot, row) in by_offset {
            if row >= self.index.len() {
                self.window[slot] = Some(Err(Error::InvalidConfig(format!("row {row} out of range"))));
                continue;
            }
            let obs = self
                .index
                .read_bytes(row, &mut self.buf)
                .and_then(|_| self.index.parse_row(row, &self.buf));
            self.window[slot] = Some(obs);
        }
        self.pos = end;
        self.window_pos = 0;
        Ok(())
    }
}

impl Iterator for OrderedRows<'_> {
    type Item = Result<Observation>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.window_pos == self.window.len() {
            if self.pos == self.order.len() {
                return None;
            }
            if let Err(e) = self.refill() {
                self.pos = self.order.len();
                self.window.clear();
                self.window_pos = 0;
                return Some(Err(e));
            }
        }
        let item = self.window[self.window_pos].take();
        self.window_pos += 1;
        item
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use std::io::Write;

    fn write(contents: &str) -> NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    fn wage_schema() -> DatasetSchema {
        DatasetSchema::new("wage", vec!["educ".into()], true)
    }

    #[test]
    fn reads_rows_with_intercept() {
        let f = write("wage,educ,age\n10,12,30\n12.5,16,40\n9,10,22\n");
        let rows: Vec<Observation> = open_csv(f.path(), &wage_schema())
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].x, vec![1.0, 16.0]);
        assert_eq!(rows[1].y, 12.5);
    }

    #[test]
    fn na_cell_reports_row_and_column() {
        let f = write("wage,educ\n10,12\n11,NA\n");
        let err = open_csv(f.path(), &wage_schema())
            .unwrap()
            .collect::<Result<Vec<_>>>()
            .unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 3);
                assert_eq!(column, "educ");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_and_inf_are_rejected() {
        let f = write("wage,educ\n10,NaN\n");
        assert!(open_csv(f.path(), &wage_schema()).unwrap().next().unwrap().is_err());
        let f = write("wage,educ\ninf,1\n");
        assert!(open_csv(f.path(), &wage_schema()).unwrap().next().unwrap().is_err());
    }

    #[test]
    fn missing_column_and_ragged_rows() {
        let f = write("wage,school\n1,2\n");
        assert!(matches!(open_csv(f.path(), &wage_schema()), Err(Error::MissingColumn(c)) if c == "educ"));
        let f = write("wage,educ\n1,2\n3\n");
        let err = open_csv(f.path(), &wage_schema())
            .unwrap()
            .collect::<Result<Vec<_>>>()
            .unwrap_err();
        assert!(matches!(err, Error::RaggedRow { row: 3, expected: 2, found: 1 }));
    }

    #[test]
    fn header_only_file_is_empty() {
        let f = write("wage,educ\n");
        assert_eq!(open_csv(f.path(), &wage_schema()).unwrap().count(), 0);
        assert!(IndexedCsv::build(f.path(), &wage_schema()).unwrap().is_empty());
    }

    #[test]
    fn schema_validation() {
        let header: Vec<String> = ["y", "a", "b"].iter().map(|s| s.to_string()).collect();
        let s = DatasetSchema::new("y", vec!["y".into()], true);
        assert!(s.resolve(&header).is_err());
        let s = DatasetSchema::new("y", vec![], true);
        let r = s.resolve(&header).unwrap();
        assert_eq!(r.features, vec![1, 2]);
        assert_eq!(r.names, vec!["(intercept)", "a", "b"]);
        let s = DatasetSchema::new(0usize, vec![2usize.into()], false);
        assert_eq!(s.resolve(&header).unwrap().dim(), 1);
    }

    #[test]
    fn permutation_properties() {
        assert_eq!(shuffled_indices(1, 99), vec![0]);
        let p = shuffled_indices(1000, 5);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..1000).collect::<Vec<_>>());
        assert_eq!(p, shuffled_indices(1000, 5));
        assert_ne!(p, shuffled_indices(1000, 6));
        assert!(shuffled_indices(0, 1).is_empty());
    }

    #[test]
    fn indexed_rows_match_sequential_rows() {
        let mut text = String::from("y,a,b\n");
        for i in 0..50 {
            text.push_str(&format!("{},{},{}\r\n", i, i * 2, i as f64 / 3.0));
        }
        let f = write(&text);
        let schema = DatasetSchema::new("y", vec![], false);
        let seq: Vec<Observation> = open_csv(f.path(), &schema).unwrap().collect::<Result<_>>().unwrap();
        let idx = IndexedCsv::build(f.path(), &schema).unwrap();
        assert_eq!(idx.len(), 50);
        for (i, obs) in seq.iter().enumerate() {
            assert_eq!(&idx.read_row(i).unwrap(), obs);
        }
        let perm = shuffled_indices(50, 11);
        let shuffled: Vec<Observation> = idx.shuffled(11).collect::<Result<_>>().unwrap();
        for (k, &row) in perm.iter().enumerate() {
            assert_eq!(shuffled[k], seq[row]);
        }
    }

    #[test]
    fn mutation_after_indexing_is_detected() {
        let f = write("y,a\n1,2\n3,4\n");
        let schema = DatasetSchema::new("y", vec![], true);
        let idx = IndexedCsv::build(f.path(), &schema).unwrap();
        let mut h = fs::OpenOptions::new().append(true).open(f.path()).unwrap();
        h.write_all(b"5,6\n").unwrap();
        h.flush().unwrap();
        let err = idx.shuffled(1).next().unwrap().unwrap_err();
        assert!(matches!(err, Error::IndexMismatch { .. }));
    }

    #[test]
    fn gzip_input_is_accepted() {
        let mut f = tempfile::Builder::new().suffix(".csv.gz").tempfile().unwrap();
        {
            let mut enc = flate2::write::GzEncoder::new(f.as_file_mut(), flate2::Compression::fast());
            enc.write_all(b"y,a\n1,2\n3,4\n5,6\n").unwrap();
            enc.finish().unwrap();
        }
        let schema = DatasetSchema::new("y", vec![], true);
        assert_eq!(open_csv(f.path(), &schema).unwrap().count(), 3);
        let idx = IndexedCsv::build(f.path(), &schema).unwrap();
        let rows: Vec<Observation> = idx.shuffled(3).collect::<Result<_>>().unwrap();
        let mut ys: Vec<f64> = rows.iter().map(|o| o.y).collect();
        ys.sort_by(f64::total_cmp);
        assert_eq!(ys, vec![1.0, 3.0, 5.0]);
    }

    #[test]
    fn dataset_roundtrip_through_csv() {
        let mut ds = Dataset::new(2).unwrap();
        ds.push(&[1.0, 0.25], -3.5).unwrap();
        ds.push(&[1.0, 1e-7], 2.0).unwrap();
        let f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        ds.write_csv(f.path(), &["c".into(), "z".into()]).unwrap();
        let schema = DatasetSchema::new("y", vec!["c".into(), "z".into()], false);
        let back = Dataset::from_observations(2, open_csv(f.path(), &schema).unwrap()).unwrap();
        assert_eq!(back, ds);
    }
}
