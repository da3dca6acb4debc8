//! Layer-named flat parameter storage.
//!
//! A [`ParamVector`] is the universal currency of the simulator: models,
//! client updates, gradients, masks, defenses and the aggregator all operate
//! on flat `f64` vectors partitioned into named segments by a [`LayerSchema`].

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Which of the two supported model families a schema describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Lstm,
    Transformer,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Lstm => "lstm",
            ModelKind::Transformer => "transformer",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(ModelKind::Lstm),
            "transformer" => Ok(ModelKind::Transformer),
            other => Err(Error::Config(format!("unknown model kind '{other}'"))),
        }
    }
}

/// Dimensions needed to run a forward pass over a schema's parameters.
///
/// `seq_len` bounds the positional table for transformers; LSTMs accept any
/// sequence length and carry it only for bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelMeta {
    pub kind: ModelKind,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub seq_len: usize,
}

/// Ordered, named partition of a flat parameter vector.
///
/// Equality is structural (names and lengths); the optional model metadata is
/// derived bookkeeping and checkpoints reconstruct it best-effort.
#[derive(Debug)]
pub struct LayerSchema {
    names: Vec<String>,
    offsets: Vec<usize>, // offsets.len() == names.len() + 1
    meta: Option<ModelMeta>,
}

impl PartialEq for LayerSchema {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.offsets == other.offsets
    }
}

impl Eq for LayerSchema {}

impl LayerSchema {
    pub fn new(segments: Vec<(String, usize)>) -> Result<Self> {
        Self::build(segments, None)
    }

    pub fn with_meta(segments: Vec<(String, usize)>, meta: ModelMeta) -> Result<Self> {
        Self::build(segments, Some(meta))
    }

    fn build(segments: Vec<(String, usize)>, meta: Option<ModelMeta>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Config("schema must have at least one segment".into()));
        }
        let mut seen = BTreeSet::new();
        let mut offsets = Vec::with_capacity(segments.len() + 1);
        let mut names = Vec::with_capacity(segments.len());
        offsets.push(0);
        for (name, len) in segments {
            if name.is_empty() {
                return Err(Error::Config("empty layer name".into()));
            }
            if len == 0 {
                return Err(Error::Config(format!("layer '{name}' has zero length")));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Config(format!("duplicate layer name '{name}'")));
            }
            offsets.push(offsets.last().unwrap() + len);
            names.push(name);
        }
        Ok(Self { names, offsets, meta })
    }

    pub fn total_len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn num_segments(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn meta(&self) -> Option<ModelMeta> {
        self.meta
    }

    pub fn segment_name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn segment_range(&self, idx: usize) -> Range<usize> {
        self.offsets[idx]..self.offsets[idx + 1]
    }

    pub fn segments(&self) -> impl Iterator<Item = (&str, Range<usize>)> {
        (0..self.names.len()).map(|i| (self.segment_name(i), self.segment_range(i)))
    }

    /// Range of the segment with this exact name.
    pub fn range_of(&self, name: &str) -> Option<Range<usize>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.segment_range(i))
    }

    /// True when `selector` designates the segment `name`.
    ///
    /// A selector matches a segment whose full name equals it, or whose name
    /// ends with `".{selector}"`. The suffix rule lets a single selector such
    /// as `mlp.c_fc` address the block-qualified segments `h0.mlp.c_fc`,
    /// `h1.mlp.c_fc`, ... so attack configs carry over unchanged between
    /// 1-block and multi-block models.
    pub fn selector_matches(selector: &str, name: &str) -> bool {
        name == selector
            || (name.len() > selector.len()
                && name.ends_with(selector)
                && name.as_bytes()[name.len() - selector.len() - 1] == b'.')
    }

    /// Resolve a set of selectors to segment indices. Errors when a selector
    /// matches nothing.
    pub fn resolve_selectors<'a, I>(&self, selectors: I) -> Result<Vec<usize>>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut picked = BTreeSet::new();
        for sel in selectors {
            let mut any = false;
            for (i, name) in self.names.iter().enumerate() {
                if Self::selector_matches(sel, name) {
                    picked.insert(i);
                    any = true;
                }
            }
            if !any {
                return Err(Error::Config(format!(
                    "layer selector '{sel}' matches no segment (have: {})",
                    self.names.join(", ")
                )));
            }
        }
        Ok(picked.into_iter().collect())
    }

    /// Try to reconstruct model dimensions from segment names and lengths.
    /// Used when loading checkpoints, whose binary form carries only the
    /// name-length table.
    pub fn infer_meta(segments: &[(String, usize)]) -> Option<ModelMeta> {
        let get = |name: &str| segments.iter().find(|(n, _)| n == name).map(|(_, l)| *l);
        let names: Vec<&str> = segments.iter().map(|(n, _)| n.as_str()).collect();
        if names == ["encoder", "ih", "hh", "decoder"] {
            let ih = get("ih")?;
            if ih % 4 != 0 {
                return None;
            }
            let h = ((ih / 4) as f64).sqrt() as usize;
            if h == 0 || 4 * h * h != ih {
                return None;
            }
            let enc = get("encoder")?;
            if enc % h != 0 {
                return None;
            }
            let v = enc / h;
            if get("hh")? != 4 * h * h || get("decoder")? != v * h + v {
                return None;
            }
            return Some(ModelMeta {
                kind: ModelKind::Lstm,
                vocab_size: v,
                hidden_dim: h,
                num_blocks: 1,
                seq_len: 0,
            });
        }
        if names.first() == Some(&"wte") && names.last() == Some(&"head") {
            let h = get("ln_f")? / 2;
            if h == 0 {
                return None;
            }
            let head = get("head")?;
            if head % (h + 1) != 0 {
                return None;
            }
            let v = head / (h + 1);
            let wpe = get("wpe")?;
            if wpe % h != 0 || get("wte")? != v * h {
                return None;
            }
            let seq = wpe / h;
            let blocks = names.iter().filter(|n| n.ends_with(".ln_1")).count();
            if blocks == 0 {
                return None;
            }
            return Some(ModelMeta {
                kind: ModelKind::Transformer,
                vocab_size: v,
                hidden_dim: h,
                num_blocks: blocks,
                seq_len: seq,
            });
        }
        None
    }
}

/// Flat `f64` parameter vector tied to a schema.
#[derive(Clone, Debug)]
pub struct ParamVector {
    values: Vec<f64>,
    schema: Arc<LayerSchema>,
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        self.schema_matches(other) && self.values == other.values
    }
}

impl ParamVector {
    pub fn new(values: Vec<f64>, schema: Arc<LayerSchema>) -> Result<Self> {
        if values.len() != schema.total_len() {
            return Err(Error::Config(format!(
                "value count {} does not match schema total {}",
                values.len(),
                schema.total_len()
            )));
        }
        Ok(Self { values, schema })
    }

    pub fn zeros(schema: Arc<LayerSchema>) -> Self {
        Self {
            values: vec![0.0; schema.total_len()],
            schema,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn schema(&self) -> &Arc<LayerSchema> {
        &self.schema
    }

    /// Segment slice by exact name.
    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.schema.range_of(name).map(|r| &self.values[r])
    }

    pub fn schema_matches(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.schema, &other.schema) || self.schema == other.schema
    }

    fn check_schema(&self, other: &Self, op: &str) -> Result<()> {
        if self.schema_matches(other) {
            Ok(())
        } else {
            Err(Error::Protocol(format!("{op}: schema mismatch")))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_schema(other, "dot")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        self.check_schema(other, "add_scaled")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    /// `self - other` as a new vector.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_schema(other, "sub")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self {
            values,
            schema: self.schema.clone(),
        })
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    /// Binary checkpoint format: little-endian name-length table followed by
    /// the raw values.
    ///
    /// ```text
    /// u32 segment count
    /// per segment: u32 name byte count, name bytes (utf-8), u64 segment length
    /// f64 x total
    /// ```
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.schema.num_segments() as u32).to_le_bytes())?;
        for (name, range) in self.schema.segments() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(range.len() as u64).to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        fn read_exact_buf<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Data(format!("checkpoint truncated: {e}")))?;
            Ok(buf)
        }
        let n_seg = u32::from_le_bytes(read_exact_buf(r, 4)?.try_into().unwrap()) as usize;
        if n_seg == 0 || n_seg > 1 << 20 {
            return Err(Error::Data(format!("implausible segment count {n_seg}")));
        }
        let mut segments = Vec::with_capacity(n_seg);
        for _ in 0..n_seg {
            let name_len = u32::from_le_bytes(read_exact_buf(r, 4)?.try_into().unwrap()) as usize;
            if name_len > 4096 {
                return Err(Error::Data(format!("implausible name length {name_len}")));
            }
            let name = String::from_utf8(read_exact_buf(r, name_len)?)
                .map_err(|_| Error::Data("segment name is not utf-8".into()))?;
            let len = u64::from_le_bytes(read_exact_buf(r, 8)?.try_into().unwrap()) as usize;
            segments.push((name, len));
        }
        let meta = LayerSchema::infer_meta(&segments);
        let schema = match meta {
            Some(m) => LayerSchema::with_meta(segments, m)?,
            None => LayerSchema::new(segments)?,
        };
        let total = schema.total_len();
        let mut values = Vec::with_capacity(total);
        for _ in 0..total {
            values.push(f64::from_le_bytes(read_exact_buf(r, 8)?.try_into().unwrap()));
        }
        Self::new(values, Arc::new(schema))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_schema() -> Arc<LayerSchema> {
        Arc::new(
            LayerSchema::new(vec![("a".into(), 2), ("b".into(), 3)]).unwrap(),
        )
    }

    #[test]
    fn rejects_duplicates_and_zero_lengths() {
        assert!(LayerSchema::new(vec![("a".into(), 2), ("a".into(), 1)]).is_err());
        assert!(LayerSchema::new(vec![("a".into(), 0)]).is_err());
        assert!(LayerSchema::new(vec![]).is_err());
    }

    #[test]
    fn segment_lookup() {
        let s = toy_schema();
        assert_eq!(s.total_len(), 5);
        assert_eq!(s.range_of("b"), Some(2..5));
        assert_eq!(s.range_of("c"), None);
    }

    #[test]
    fn selector_suffix_matching() {
        assert!(LayerSchema::selector_matches("mlp.c_fc", "h0.mlp.c_fc"));
        assert!(LayerSchema::selector_matches("mlp.c_fc", "mlp.c_fc"));
        assert!(!LayerSchema::selector_matches("c_fc", "xc_fc"));
        assert!(!LayerSchema::selector_matches("lp.c_fc", "h0.mlp.c_fc"));
        assert!(!LayerSchema::selector_matches("ih", "hh"));
    }

    #[test]
    fn resolve_unknown_selector_is_config_error() {
        let s = toy_schema();
        assert!(matches!(
            s.resolve_selectors(["nope"]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn vector_length_must_match_schema() {
        let s = toy_schema();
        assert!(ParamVector::new(vec![0.0; 4], s.clone()).is_err());
        assert!(ParamVector::new(vec![0.0; 5], s).is_ok());
    }

    #[test]
    fn add_scaled_and_sub() {
        let s = toy_schema();
        let mut a = ParamVector::new(vec![1.0, 2.0, 3.0, 4.0, 5.0], s.clone()).unwrap();
        let b = ParamVector::new(vec![1.0; 5], s).unwrap();
        a.add_scaled(&b, 2.0).unwrap();
        assert_eq!(a.values(), &[3.0, 4.0, 5.0, 6.0, 7.0]);
        let d = a.sub(&b).unwrap();
        assert_eq!(d.values(), &[2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn schema_mismatch_is_protocol_error() {
        let a = ParamVector::zeros(toy_schema());
        let other = Arc::new(LayerSchema::new(vec![("a".into(), 5)]).unwrap());
        let b = ParamVector::zeros(other);
        assert!(matches!(a.dot(&b), Err(Error::Protocol(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let s = toy_schema();
        let v = ParamVector::new(vec![0.5, -1.25, 3.0, f64::MIN_POSITIVE, 1e300], s).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        let back = ParamVector::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn checkpoint_truncation_is_data_error() {
        let v = ParamVector::zeros(toy_schema());
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            ParamVector::read_from(&mut buf.as_slice()),
            Err(Error::Data(_))
        ));
    }
}
