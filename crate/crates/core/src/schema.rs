//! Attribute schemas, datasets, and grid set divisions.
//!
//! A [`Schema`] is the authoritative description of the attribute domain: the
//! value ranges it declares are never inferred from the data, so a range may be
//! wider than anything present in the table. A [`SetDivision`] partitions the
//! joint domain of some attributes into a grid of disjoint cells; it must be
//! validated against a schema (yielding a [`GridLayout`]) before it can be
//! counted, noised, or assessed.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Relative tolerance used when checking lattice alignment of real endpoints.
const LATTICE_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("duplicate attribute `{0}`")]
    DuplicateAttribute(String),
    #[error("invalid division: {0}")]
    InvalidDivision(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttributeKind {
    Numerical { lo: f64, hi: f64, min_interval: f64 },
    Categorical { categories: Vec<String> },
}

/// One attribute of a sensitive table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAttribute", into = "RawAttribute")]
pub struct AttributeSchema {
    pub name: String,
    pub kind: AttributeKind,
    pub sensitive: bool,
}

/// Wire form of an attribute: `{name, kind, range, min_interval, categories, sensitive}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttribute {
    name: String,
    kind: RawKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min_interval: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    categories: Option<Vec<String>>,
    #[serde(default)]
    sensitive: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawKind {
    Numerical,
    Categorical,
}

impl TryFrom<RawAttribute> for AttributeSchema {
    type Error = SchemaError;

    fn try_from(raw: RawAttribute) -> Result<Self, Self::Error> {
        let kind = match raw.kind {
            RawKind::Numerical => {
                if raw.categories.is_some() {
                    return Err(SchemaError::SchemaViolation(format!(
                        "numerical attribute `{}` must not list categories",
                        raw.name
                    )));
                }
                let [lo, hi] = raw.range.ok_or_else(|| {
                    SchemaError::SchemaViolation(format!("numerical attribute `{}` needs a range", raw.name))
                })?;
                let min_interval = raw.min_interval.ok_or_else(|| {
                    SchemaError::SchemaViolation(format!(
                        "numerical attribute `{}` needs a min_interval",
                        raw.name
                    ))
                })?;
                AttributeKind::Numerical { lo, hi, min_interval }
            }
            RawKind::Categorical => {
                if raw.range.is_some() || raw.min_interval.is_some() {
                    return Err(SchemaError::SchemaViolation(format!(
                        "categorical attribute `{}` must not carry range or min_interval",
                        raw.name
                    )));
                }
                let categories = raw.categories.ok_or_else(|| {
                    SchemaError::SchemaViolation(format!("categorical attribute `{}` needs categories", raw.name))
                })?;
                AttributeKind::Categorical { categories }
            }
        };
        AttributeSchema::new(raw.name, kind, raw.sensitive)
    }
}

impl From<AttributeSchema> for RawAttribute {
    fn from(attr: AttributeSchema) -> Self {
        match attr.kind {
            AttributeKind::Numerical { lo, hi, min_interval } => RawAttribute {
                name: attr.name,
                kind: RawKind::Numerical,
                range: Some([lo, hi]),
                min_interval: Some(min_interval),
                categories: None,
                sensitive: attr.sensitive,
            },
            AttributeKind::Categorical { categories } => RawAttribute {
                name: attr.name,
                kind: RawKind::Categorical,
                range: None,
                min_interval: None,
                categories: Some(categories),
                sensitive: attr.sensitive,
            },
        }
    }
}

/// Position of `x` on the lattice `lo + k * step`, if it lies on it.
fn lattice_index(x: f64, lo: f64, step: f64) -> Option<usize> {
    let k = (x - lo) / step;
    let r = k.round();
    if r < 0.0 || (k - r).abs() > LATTICE_TOL * r.abs().max(1.0) {
        return None;
    }
    Some(r as usize)
}

impl AttributeSchema {
    pub fn new(name: impl Into<String>, kind: AttributeKind, sensitive: bool) -> Result<Self, SchemaError> {
        let name = name.into();
        if name.is_empty() {
            return Err(SchemaError::SchemaViolation("attribute name is empty".into()));
        }
        match &kind {
            AttributeKind::Numerical { lo, hi, min_interval } => {
                if !(lo.is_finite() && hi.is_finite() && *hi > *lo) {
                    return Err(SchemaError::SchemaViolation(format!(
                        "`{name}`: range [{lo}, {hi}] must satisfy hi > lo"
                    )));
                }
                if !(min_interval.is_finite() && *min_interval > 0.0) {
                    return Err(SchemaError::SchemaViolation(format!(
                        "`{name}`: min_interval must be positive"
                    )));
                }
                if lattice_index(*hi, *lo, *min_interval).is_none() {
                    return Err(SchemaError::SchemaViolation(format!(
                        "`{name}`: range width {} is not a multiple of min_interval {min_interval}",
                        hi - lo
                    )));
                }
            }
            AttributeKind::Categorical { categories } => {
                if categories.is_empty() {
                    return Err(SchemaError::SchemaViolation(format!("`{name}`: no categories")));
                }
                let mut seen = BTreeSet::new();
                for c in categories {
                    if !seen.insert(c.as_str()) {
                        return Err(SchemaError::SchemaViolation(format!(
                            "`{name}`: duplicate category `{c}`"
                        )));
                    }
                }
            }
        }
        Ok(Self { name, kind, sensitive })
    }

    pub fn numerical(name: &str, lo: f64, hi: f64, min_interval: f64, sensitive: bool) -> Result<Self, SchemaError> {
        Self::new(name, AttributeKind::Numerical { lo, hi, min_interval }, sensitive)
    }

    pub fn categorical<S: AsRef<str>>(name: &str, categories: &[S], sensitive: bool) -> Result<Self, SchemaError> {
        let categories = categories.iter().map(|c| c.as_ref().to_string()).collect();
        Self::new(name, AttributeKind::Categorical { categories }, sensitive)
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self.kind, AttributeKind::Numerical { .. })
    }

    /// Number of cells at the finest granularity the data interface allows.
    pub fn finest_bins(&self) -> usize {
        match &self.kind {
            AttributeKind::Numerical { lo, hi, min_interval } => {
                lattice_index(*hi, *lo, *min_interval).expect("validated on construction")
            }
            AttributeKind::Categorical { categories } => categories.len(),
        }
    }

    /// Finest bin of a numerical value. Interior boundaries belong to the
    /// right-hand bin; the upper end of the range falls in the last bin.
    pub fn numeric_bin(&self, v: f64) -> Option<usize> {
        let AttributeKind::Numerical { lo, hi, min_interval } = &self.kind else {
            return None;
        };
        if !(v >= *lo && v <= *hi) {
            return None;
        }
        let n = self.finest_bins();
        let k = (v - lo) / min_interval;
        // Snap values within rounding distance of a lattice point onto it.
        let snapped = if (k - k.round()).abs() <= LATTICE_TOL * k.abs().max(1.0) {
            k.round()
        } else {
            k.floor()
        };
        Some((snapped as usize).min(n - 1))
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        match &self.kind {
            AttributeKind::Categorical { categories } => categories.iter().position(|c| c == label),
            AttributeKind::Numerical { .. } => None,
        }
    }

    /// Human-readable label of a finest bin.
    pub fn bin_label(&self, bin: usize) -> String {
        match &self.kind {
            AttributeKind::Numerical { lo, min_interval, .. } => {
                let a = lo + bin as f64 * min_interval;
                let b = a + min_interval;
                if bin + 1 == self.finest_bins() {
                    format!("[{a}, {b}]")
                } else {
                    format!("[{a}, {b})")
                }
            }
            AttributeKind::Categorical { categories } => categories[bin].clone(),
        }
    }
}

/// Ordered list of attributes; names are unique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AttributeSchema>", into = "Vec<AttributeSchema>")]
pub struct Schema {
    attributes: Vec<AttributeSchema>,
}

impl TryFrom<Vec<AttributeSchema>> for Schema {
    type Error = SchemaError;

    fn try_from(attributes: Vec<AttributeSchema>) -> Result<Self, Self::Error> {
        Schema::new(attributes)
    }
}

impl From<Schema> for Vec<AttributeSchema> {
    fn from(s: Schema) -> Self {
        s.attributes
    }
}

impl Schema {
    pub fn new(attributes: Vec<AttributeSchema>) -> Result<Self, SchemaError> {
        let mut seen = BTreeSet::new();
        for a in &attributes {
            if !seen.insert(a.name.as_str()) {
                return Err(SchemaError::DuplicateAttribute(a.name.clone()));
            }
        }
        Ok(Self { attributes })
    }

    pub fn from_json_file(path: &Path) -> Result<Self, SchemaError> {
        let text = std::fs::read_to_string(path).map_err(|e| malformed(path, e))?;
        serde_json::from_str(&text).map_err(|e| malformed(path, e))
    }

    pub fn attributes(&self) -> &[AttributeSchema] {
        &self.attributes
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize, SchemaError> {
        self.attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| SchemaError::UnknownAttribute(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&AttributeSchema, SchemaError> {
        self.index_of(name).map(|i| &self.attributes[i])
    }
}

fn malformed(path: &Path, e: impl fmt::Display) -> SchemaError {
    SchemaError::MalformedFile { path: path.display().to_string(), reason: e.to_string() }
}

/// Values of one attribute across all records.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numerical(Vec<f64>),
    /// Category indices into the attribute's category list.
    Categorical(Vec<u32>),
}

impl Column {
    fn len(&self) -> usize {
        match self {
            Column::Numerical(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }
}

/// A validated table. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    schema: Schema,
    columns: Vec<Column>,
    /// Finest bin index of every value, per attribute.
    bins: Vec<Vec<u32>>,
    n: usize,
}

impl Dataset {
    pub fn new(schema: Schema, columns: Vec<Column>) -> Result<Self, SchemaError> {
        if columns.len() != schema.len() {
            return Err(SchemaError::SchemaViolation(format!(
                "{} columns for {} attributes",
                columns.len(),
                schema.len()
            )));
        }
        let n = columns.first().map_or(0, Column::len);
        let mut bins = Vec::with_capacity(columns.len());
        for (attr, col) in schema.attributes().iter().zip(&columns) {
            if col.len() != n {
                return Err(SchemaError::SchemaViolation(format!(
                    "column `{}` has {} values, expected {n}",
                    attr.name,
                    col.len()
                )));
            }
            let col_bins = match (col, &attr.kind) {
                (Column::Numerical(values), AttributeKind::Numerical { lo, hi, .. }) => values
                    .iter()
                    .enumerate()
                    .map(|(row, &v)| {
                        attr.numeric_bin(v).map(|b| b as u32).ok_or_else(|| {
                            SchemaError::SchemaViolation(format!(
                                "record {row}: `{}` = {v} outside [{lo}, {hi}]",
                                attr.name
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?,
                (Column::Categorical(values), AttributeKind::Categorical { categories }) => {
                    if let Some((row, v)) = values.iter().enumerate().find(|(_, &v)| v as usize >= categories.len()) {
                        return Err(SchemaError::SchemaViolation(format!(
                            "record {row}: `{}` category index {v} out of range",
                            attr.name
                        )));
                    }
                    values.clone()
                }
                _ => {
                    return Err(SchemaError::SchemaViolation(format!(
                        "column `{}` does not match the attribute kind",
                        attr.name
                    )))
                }
            };
            bins.push(col_bins);
        }
        Ok(Self { schema, columns, bins, n })
    }

    /// Reads a CSV table whose header row names exactly the schema's attributes
    /// (in any order).
    pub fn from_csv(schema: Schema, table_file: &Path) -> Result<Self, SchemaError> {
        let file = File::open(table_file).map_err(|e| malformed(table_file, e))?;
        Self::from_csv_reader(schema, file).map_err(|e| match e {
            SchemaError::MalformedFile { reason, .. } => malformed(table_file, reason),
            other => other,
        })
    }

    pub fn from_csv_reader<R: std::io::Read>(schema: Schema, reader: R) -> Result<Self, SchemaError> {
        let bad = |reason: String| SchemaError::MalformedFile { path: "<csv>".into(), reason };
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
        let mut position = Vec::with_capacity(schema.len());
        for attr in schema.attributes() {
            let idx = header
                .iter()
                .position(|h| h == attr.name)
                .ok_or_else(|| bad(format!("header lacks attribute `{}`", attr.name)))?;
            position.push(idx);
        }
        if header.len() != schema.len() {
            let extra: Vec<_> = header.iter().filter(|h| schema.index_of(h).is_err()).collect();
            return Err(bad(format!("header has columns not in the schema: {extra:?}")));
        }
        let mut columns: Vec<Column> = schema
            .attributes()
            .iter()
            .map(|a| if a.is_numerical() { Column::Numerical(Vec::new()) } else { Column::Categorical(Vec::new()) })
            .collect();
        for (row, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            for ((attr, &pos), col) in schema.attributes().iter().zip(&position).zip(columns.iter_mut()) {
                let field = record.get(pos).ok_or_else(|| bad(format!("record {row} is short")))?;
                match col {
                    Column::Numerical(v) => {
                        let x: f64 = field.parse().map_err(|_| {
                            SchemaError::SchemaViolation(format!(
                                "record {row}: `{}` value `{field}` is not a number",
                                attr.name
                            ))
                        })?;
                        v.push(x);
                    }
                    Column::Categorical(v) => {
                        let c = attr.category_index(field).ok_or_else(|| {
                            SchemaError::SchemaViolation(format!(
                                "record {row}: `{}` has unknown category `{field}`",
                                attr.name
                            ))
                        })?;
                        v.push(c as u32);
                    }
                }
            }
        }
        Self::new(schema, columns)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.schema.attributes().iter().map(|a| a.name.as_str()))?;
        for row in 0..self.n {
            let fields: Vec<String> = self
                .schema
                .attributes()
                .iter()
                .zip(&self.columns)
                .map(|(attr, col)| match (col, &attr.kind) {
                    (Column::Numerical(v), _) => v[row].to_string(),
                    (Column::Categorical(v), AttributeKind::Categorical { categories }) => {
                        categories[v[row] as usize].clone()
                    }
                    _ => unreachable!("kinds checked on construction"),
                })
                .collect();
            w.write_record(&fields)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    /// Number of records.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn column(&self, attr: usize) -> &Column {
        &self.columns[attr]
    }

    pub(crate) fn bins(&self, attr: usize) -> &[u32] {
        &self.bins[attr]
    }
}

/// Reads and validates a data table against its schema sidecar.
pub fn load_dataset(table_file: &Path, schema_file: &Path) -> Result<Dataset, SchemaError> {
    let schema = Schema::from_json_file(schema_file)?;
    Dataset::from_csv(schema, table_file)
}

/// How one attribute's domain is split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Contiguous `[lo, hi]` intervals in attribute units.
    Intervals(Vec<[f64; 2]>),
    /// Disjoint groups of category labels.
    Groups(Vec<Vec<String>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueDivision {
    pub attribute: String,
    #[serde(flatten)]
    pub partition: Partition,
}

impl ValueDivision {
    /// Finest division of one attribute.
    pub fn finest(attr: &AttributeSchema) -> Self {
        let partition = match &attr.kind {
            AttributeKind::Numerical { lo, min_interval, .. } => Partition::Intervals(
                (0..attr.finest_bins())
                    .map(|k| [lo + k as f64 * min_interval, lo + (k + 1) as f64 * min_interval])
                    .collect(),
            ),
            AttributeKind::Categorical { categories } => {
                Partition::Groups(categories.iter().map(|c| vec![c.clone()]).collect())
            }
        };
        Self { attribute: attr.name.clone(), partition }
    }

    /// Builds a numerical division from the finest-bin indices at which each
    /// interval starts (the first must be 0).
    pub fn from_bin_starts(attr: &AttributeSchema, starts: &[usize]) -> Self {
        let AttributeKind::Numerical { lo, min_interval, .. } = &attr.kind else {
            return Self::finest(attr);
        };
        let n = attr.finest_bins();
        let edge = |k: usize| lo + k as f64 * min_interval;
        let intervals = starts
            .iter()
            .enumerate()
            .map(|(i, &s)| [edge(s), edge(starts.get(i + 1).copied().unwrap_or(n))])
            .collect();
        Self { attribute: attr.name.clone(), partition: Partition::Intervals(intervals) }
    }

    /// Maps each finest bin to its group, checking every invariant.
    fn resolve(&self, attr: &AttributeSchema) -> Result<Vec<usize>, SchemaError> {
        let invalid = |msg: String| SchemaError::InvalidDivision(format!("`{}`: {msg}", attr.name));
        match (&self.partition, &attr.kind) {
            (Partition::Intervals(intervals), AttributeKind::Numerical { lo, hi, min_interval }) => {
                if intervals.is_empty() {
                    return Err(invalid("no intervals".into()));
                }
                let n = attr.finest_bins();
                let mut bin_to_group = Vec::with_capacity(n);
                let mut expected_start = 0usize;
                for (g, &[a, b]) in intervals.iter().enumerate() {
                    let ia = lattice_index(a, *lo, *min_interval)
                        .ok_or_else(|| invalid(format!("endpoint {a} is not on the {min_interval} lattice from {lo}")))?;
                    let ib = lattice_index(b, *lo, *min_interval)
                        .ok_or_else(|| invalid(format!("endpoint {b} is not on the {min_interval} lattice from {lo}")))?;
                    if ia != expected_start {
                        return Err(invalid(if g == 0 {
                            format!("first interval must start at {lo}, found {a}")
                        } else {
                            format!("interval starting at {a} is not contiguous with the previous one")
                        }));
                    }
                    if ib <= ia {
                        return Err(invalid(format!("interval [{a}, {b}] is empty or reversed")));
                    }
                    if ib > n {
                        return Err(invalid(format!("interval [{a}, {b}] exceeds the range end {hi}")));
                    }
                    bin_to_group.extend(std::iter::repeat_n(g, ib - ia));
                    expected_start = ib;
                }
                if expected_start != n {
                    return Err(invalid(format!("intervals do not cover the range up to {hi}")));
                }
                Ok(bin_to_group)
            }
            (Partition::Groups(groups), AttributeKind::Categorical { categories }) => {
                let mut bin_to_group = vec![usize::MAX; categories.len()];
                for (g, group) in groups.iter().enumerate() {
                    if group.is_empty() {
                        return Err(invalid(format!("group {g} is empty")));
                    }
                    for label in group {
                        let c = attr
                            .category_index(label)
                            .ok_or_else(|| invalid(format!("unknown category `{label}`")))?;
                        if bin_to_group[c] != usize::MAX {
                            return Err(invalid(format!("category `{label}` appears in more than one group")));
                        }
                        bin_to_group[c] = g;
                    }
                }
                if let Some(c) = bin_to_group.iter().position(|&g| g == usize::MAX) {
                    return Err(invalid(format!("category `{}` is not covered", categories[c])));
                }
                Ok(bin_to_group)
            }
            (Partition::Intervals(_), _) => Err(invalid("intervals given for a categorical attribute".into())),
            (Partition::Groups(_), _) => Err(invalid("category groups given for a numerical attribute".into())),
        }
    }
}

/// A grid partition over distinct attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetDivision {
    pub divisions: Vec<ValueDivision>,
}

impl SetDivision {
    pub fn new(divisions: Vec<ValueDivision>) -> Self {
        Self { divisions }
    }

    pub fn attributes(&self) -> impl Iterator<Item = &str> {
        self.divisions.iter().map(|d| d.attribute.as_str())
    }
}

/// A validated [`SetDivision`]: the attribute indices plus, per attribute, the
/// group of every finest bin. Cells are flattened in row-major order with the
/// last attribute varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLayout {
    attrs: Vec<usize>,
    bin_to_group: Vec<Vec<usize>>,
    shape: Vec<usize>,
}

impl GridLayout {
    pub fn attrs(&self) -> &[usize] {
        &self.attrs
    }

    /// Number of groups along each attribute.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn n_cells(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bin_to_group(&self, axis: usize) -> &[usize] {
        &self.bin_to_group[axis]
    }

    /// Number of finest bins along `axis` that fall in each group.
    pub fn group_widths(&self, axis: usize) -> Vec<usize> {
        let mut w = vec![0; self.shape[axis]];
        for &g in &self.bin_to_group[axis] {
            w[g] += 1;
        }
        w
    }

    pub fn flat_index(&self, index: &[usize]) -> usize {
        flat_index(&self.shape, index)
    }

    pub fn cell(&self, flat: usize) -> Cell {
        Cell { index: unflatten(&self.shape, flat) }
    }

    /// Per-attribute bounds of a cell, for display.
    pub fn describe(&self, schema: &Schema, cell: &Cell) -> Vec<CellBound> {
        self.attrs
            .iter()
            .enumerate()
            .map(|(axis, &a)| {
                let attr = &schema.attributes()[a];
                let bins: Vec<usize> = (0..self.bin_to_group[axis].len())
                    .filter(|&b| self.bin_to_group[axis][b] == cell.index[axis])
                    .collect();
                match &attr.kind {
                    AttributeKind::Numerical { lo, min_interval, .. } => CellBound::Interval {
                        attribute: attr.name.clone(),
                        lo: lo + bins[0] as f64 * min_interval,
                        hi: lo + (bins[bins.len() - 1] + 1) as f64 * min_interval,
                    },
                    AttributeKind::Categorical { categories } => CellBound::Group {
                        attribute: attr.name.clone(),
                        categories: bins.iter().map(|&b| categories[b].clone()).collect(),
                    },
                }
            })
            .collect()
    }
}

pub(crate) fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    index.iter().zip(shape).fold(0, |acc, (&i, &s)| acc * s + i)
}

pub(crate) fn unflatten(shape: &[usize], mut flat: usize) -> Vec<usize> {
    let mut index = vec![0; shape.len()];
    for (slot, &s) in index.iter_mut().zip(shape).rev() {
        *slot = flat % s;
        flat /= s;
    }
    index
}

/// One grid cell: a group index per attribute of the division.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub index: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CellBound {
    Interval { attribute: String, lo: f64, hi: f64 },
    Group { attribute: String, categories: Vec<String> },
}

impl fmt::Display for CellBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellBound::Interval { attribute, lo, hi } => write!(f, "{attribute}∈[{lo},{hi}]"),
            CellBound::Group { attribute, categories } => write!(f, "{attribute}∈{{{}}}", categories.join(",")),
        }
    }
}

/// Division at the finest granularity allowed by the schema.
pub fn finest_division(attributes: &[&str], schema: &Schema) -> Result<SetDivision, SchemaError> {
    let mut seen = BTreeSet::new();
    let mut divisions = Vec::with_capacity(attributes.len());
    for &name in attributes {
        if !seen.insert(name) {
            return Err(SchemaError::DuplicateAttribute(name.to_string()));
        }
        divisions.push(ValueDivision::finest(schema.get(name)?));
    }
    Ok(SetDivision { divisions })
}

/// Checks disjointness, coverage, and lattice alignment of a division.
pub fn validate_division(division: &SetDivision, schema: &Schema) -> Result<GridLayout, SchemaError> {
    if division.divisions.is_empty() {
        return Err(SchemaError::InvalidDivision("a division needs at least one attribute".into()));
    }
    let mut attrs = Vec::with_capacity(division.divisions.len());
    let mut bin_to_group = Vec::with_capacity(division.divisions.len());
    let mut shape = Vec::with_capacity(division.divisions.len());
    let mut seen = HashMap::new();
    for vd in &division.divisions {
        let idx = schema
            .index_of(&vd.attribute)
            .map_err(|_| SchemaError::InvalidDivision(format!("unknown attribute `{}`", vd.attribute)))?;
        if seen.insert(idx, ()).is_some() {
            return Err(SchemaError::InvalidDivision(format!("attribute `{}` divided twice", vd.attribute)));
        }
        let groups = vd.resolve(&schema.attributes()[idx])?;
        shape.push(groups.iter().max().map_or(0, |m| m + 1));
        attrs.push(idx);
        bin_to_group.push(groups);
    }
    Ok(GridLayout { attrs, bin_to_group, shape })
}

/// Exact per-cell record counts.
///
/// Deliberately not serializable: exact counts of the curated table must be
/// noised before they leave the curator.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactCounts {
    shape: Vec<usize>,
    counts: Vec<u64>,
}

impl ExactCounts {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, cell: &Cell) -> u64 {
        self.counts[flat_index(&self.shape, &cell.index)]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub(crate) fn to_real(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

/// Exact counts of a dataset on a grid.
pub fn count_cells(dataset: &Dataset, division: &SetDivision) -> Result<ExactCounts, SchemaError> {
    let layout = validate_division(division, dataset.schema())?;
    Ok(count_layout(dataset, &layout))
}

pub(crate) fn count_layout(dataset: &Dataset, layout: &GridLayout) -> ExactCounts {
    let mut counts = vec![0u64; layout.n_cells()];
    let cols: Vec<&[u32]> = layout.attrs.iter().map(|&a| dataset.bins(a)).collect();
    for row in 0..dataset.n() {
        let mut flat = 0;
        for (axis, col) in cols.iter().enumerate() {
            flat = flat * layout.shape[axis] + layout.bin_to_group[axis][col[row] as usize];
        }
        counts[flat] += 1;
    }
    ExactCounts { shape: layout.shape.clone(), counts }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn claim() -> AttributeSchema {
        AttributeSchema::numerical("claim_amount", 0.0, 40_000.0, 5_000.0, true).unwrap()
    }

    fn policy() -> AttributeSchema {
        AttributeSchema::categorical("policy", &["A", "B", "C"], false).unwrap()
    }

    fn intervals(attr: &str, iv: &[[f64; 2]]) -> SetDivision {
        SetDivision::new(vec![ValueDivision { attribute: attr.into(), partition: Partition::Intervals(iv.to_vec()) }])
    }

    #[test]
    fn numeric_range_must_be_lattice_multiple() {
        assert!(AttributeSchema::numerical("x", 0.0, 10.0, 3.0, false).is_err());
        assert!(AttributeSchema::numerical("x", 5.0, 5.0, 1.0, false).is_err());
        assert_eq!(claim().finest_bins(), 8);
    }

    #[test]
    fn categories_must_be_distinct_and_nonempty() {
        assert!(AttributeSchema::categorical::<&str>("p", &[], false).is_err());
        assert!(AttributeSchema::categorical("p", &["A", "A"], false).is_err());
    }

    #[test]
    fn schema_json_rejects_mixed_fields() {
        let bad = r#"[{"name":"p","kind":"categorical","categories":["A"],"range":[0,1]}]"#;
        assert!(serde_json::from_str::<Schema>(bad).is_err());
        let good = r#"[{"name":"claim_amount","kind":"numerical","range":[0,40000],"min_interval":5000,"sensitive":true}]"#;
        let s: Schema = serde_json::from_str(good).unwrap();
        assert_eq!(s.attributes()[0], claim());
    }

    #[test]
    fn boundaries_go_right_and_last_interval_is_closed() {
        let a = AttributeSchema::numerical("v", 0.0, 20.0, 5.0, false).unwrap();
        assert_eq!(a.numeric_bin(0.0), Some(0));
        assert_eq!(a.numeric_bin(5.0), Some(1));
        assert_eq!(a.numeric_bin(4.999), Some(0));
        assert_eq!(a.numeric_bin(20.0), Some(3));
        assert_eq!(a.numeric_bin(20.001), None);
        assert_eq!(a.numeric_bin(-0.1), None);
    }

    #[test]
    fn unknown_category_is_a_violation() {
        let schema = Schema::new(vec![policy()]).unwrap();
        let err = Dataset::from_csv_reader(schema, "policy\nA\nD\n".as_bytes()).unwrap_err();
        assert!(matches!(err, SchemaError::SchemaViolation(m) if m.contains("`D`")));
    }

    #[test]
    fn empty_table_has_zero_records() {
        let schema = Schema::new(vec![claim(), policy()]).unwrap();
        let ds = Dataset::from_csv_reader(schema, "policy,claim_amount\n".as_bytes()).unwrap();
        assert_eq!(ds.n(), 0);
        let counts = count_cells(&ds, &finest_division(&["claim_amount"], ds.schema()).unwrap()).unwrap();
        assert_eq!(counts.counts(), &[0; 8]);
    }

    #[test]
    fn header_must_match_schema() {
        let schema = Schema::new(vec![policy()]).unwrap();
        assert!(matches!(
            Dataset::from_csv_reader(schema.clone(), "policy,extra\nA,1\n".as_bytes()),
            Err(SchemaError::MalformedFile { .. })
        ));
        assert!(matches!(
            Dataset::from_csv_reader(schema, "other\nA\n".as_bytes()),
            Err(SchemaError::MalformedFile { .. })
        ));
    }

    #[test]
    fn finest_division_errors() {
        let schema = Schema::new(vec![claim(), policy()]).unwrap();
        assert!(matches!(finest_division(&["nope"], &schema), Err(SchemaError::UnknownAttribute(_))));
        assert!(matches!(finest_division(&["policy", "policy"], &schema), Err(SchemaError::DuplicateAttribute(_))));
        let layout = validate_division(&finest_division(&["policy"], &schema).unwrap(), &schema).unwrap();
        assert_eq!(layout.n_cells(), 3);
    }

    #[test]
    fn validate_division_examples() {
        let schema = Schema::new(vec![claim(), policy()]).unwrap();
        let ok = intervals("claim_amount", &[[0.0, 10_000.0], [10_000.0, 40_000.0]]);
        assert_eq!(validate_division(&ok, &schema).unwrap().shape(), &[2]);

        let off = intervals("claim_amount", &[[0.0, 7_000.0], [7_000.0, 40_000.0]]);
        let err = validate_division(&off, &schema).unwrap_err().to_string();
        assert!(err.contains("7000") && err.contains("lattice"), "{err}");

        let gap = intervals("claim_amount", &[[0.0, 10_000.0], [15_000.0, 40_000.0]]);
        assert!(validate_division(&gap, &schema).unwrap_err().to_string().contains("contiguous"));

        let short = intervals("claim_amount", &[[0.0, 10_000.0]]);
        assert!(validate_division(&short, &schema).unwrap_err().to_string().contains("cover"));

        let uncovered = SetDivision::new(vec![ValueDivision {
            attribute: "policy".into(),
            partition: Partition::Groups(vec![vec!["A".into()], vec!["B".into()]]),
        }]);
        let err = validate_division(&uncovered, &schema).unwrap_err().to_string();
        assert!(err.contains("`C` is not covered"), "{err}");

        let overlap = SetDivision::new(vec![ValueDivision {
            attribute: "policy".into(),
            partition: Partition::Groups(vec![vec!["A".into(), "B".into()], vec!["B".into(), "C".into()]]),
        }]);
        assert!(validate_division(&overlap, &schema).unwrap_err().to_string().contains("more than one group"));
    }

    #[test]
    fn counts_one_per_bin_and_merged() {
        let a = AttributeSchema::numerical("v", 0.0, 20.0, 5.0, false).unwrap();
        let schema = Schema::new(vec![a]).unwrap();
        let ds = Dataset::new(schema.clone(), vec![Column::Numerical(vec![1.0, 6.0, 11.0, 16.0])]).unwrap();
        let finest = count_cells(&ds, &finest_division(&["v"], &schema).unwrap()).unwrap();
        assert_eq!(finest.counts(), &[1, 1, 1, 1]);
        let merged = count_cells(&ds, &intervals("v", &[[0.0, 10.0], [10.0, 20.0]])).unwrap();
        assert_eq!(merged.counts(), &[2, 2]);
    }

    #[test]
    fn flat_index_roundtrip() {
        let shape = [3, 4, 2];
        for flat in 0..24 {
            assert_eq!(flat_index(&shape, &unflatten(&shape, flat)), flat);
        }
    }

    #[test]
    fn describe_cells() {
        let schema = Schema::new(vec![claim(), policy()]).unwrap();
        let div = SetDivision::new(vec![
            intervals("claim_amount", &[[0.0, 10_000.0], [10_000.0, 40_000.0]]).divisions.remove(0),
            ValueDivision {
                attribute: "policy".into(),
                partition: Partition::Groups(vec![vec!["A".into()], vec!["B".into(), "C".into()]]),
            },
        ]);
        let layout = validate_division(&div, &schema).unwrap();
        let cell = layout.cell(3);
        assert_eq!(cell.index, vec![1, 1]);
        let d = layout.describe(&schema, &cell);
        assert_eq!(d[0].to_string(), "claim_amount∈[10000,40000]");
        assert_eq!(d[1].to_string(), "policy∈{B,C}");
    }
}
