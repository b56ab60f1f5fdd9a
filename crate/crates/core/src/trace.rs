//! Synthetic attention traces and the `.avtrace` container.
//!
//! # Format (version 1)
//!
//! A UTF-8 header of `key=value` lines, then a binary payload:
//!
//! ```text
//! AVTRACE 1
//! num_layers=<u64>
//! n_video=<u64>
//! n_audio=<u64>
//! n_text=<u64>
//! d_k=<u64>
//! meta.<key>=<value>        (zero or more, sorted by key)
//! end
//! <payload>
//! ```
//!
//! For each layer in order the payload holds `l*l` attention entries
//! (row-major), then `l*d_k` keys, then `l*d_k` values, every number an
//! IEEE-754 binary64 in little-endian byte order. Nothing follows the
//! last layer.
//!
//! # Generator
//!
//! Randomness comes from ChaCha20 (`rand_chacha::ChaCha20Rng`) seeded with
//! `seed_from_u64(seed)`. A uniform draw is `(next_u64() >> 11) * 2^-53`;
//! exponential draws are `-ln(1 - u)`; normal draws use the Box–Muller
//! cosine branch on two uniforms `z = sqrt(-2 ln(1 - u1)) cos(2 pi u2)`.
//! Per layer the generator draws attention rows top to bottom, then key
//! rows, then value rows.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_layout, AttentionMatrix, LayerKV, ModalityLayout};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "AVTRACE";

// ── Types ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct TraceLayer {
    pub attention: AttentionMatrix,
    pub kv: LayerKV,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub layout: ModalityLayout,
    pub d_k: usize,
    pub layers: Vec<TraceLayer>,
    /// Free-form provenance, e.g. generator parameters and seed.
    pub metadata: BTreeMap<String, String>,
}

impl Trace {
    pub fn new(
        layout: ModalityLayout,
        d_k: usize,
        layers: Vec<TraceLayer>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let l = layout.seq_len();
        for (n, layer) in layers.iter().enumerate() {
            if layer.attention.len() != l || layer.kv.len() != l || layer.kv.d_k() != d_k {
                return Err(Error::Shape(format!("layer {n} does not match layout or d_k")));
            }
        }
        Ok(Self { layout, d_k, layers, metadata })
    }

    #[must_use]
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Every query attends uniformly over its prefix.
    Uniform,
    /// Random rows; text queries split mass evenly per video and audio token.
    Balanced,
    /// Balanced low layers, video-dominated high layers.
    VideoConvergent,
    /// Balanced low layers, audio-dominated high layers.
    AudioSalient,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Balanced => "balanced",
            Self::VideoConvergent => "video-convergent",
            Self::AudioSalient => "audio-salient",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "balanced" => Ok(Self::Balanced),
            "video-convergent" => Ok(Self::VideoConvergent),
            "audio-salient" => Ok(Self::AudioSalient),
            other => Err(Error::Config(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_video: usize,
    pub n_audio: usize,
    pub n_text: usize,
    pub num_layers: usize,
    pub d_k: usize,
    pub regime: Regime,
    /// Layers at index `>= fraction * num_layers` are "high".
    pub convergence_start_fraction: f64,
    /// Correlation of each audio key with a paired video key, in `[0, 1]`.
    pub av_key_mixing: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    #[must_use]
    pub fn new(n_video: usize, n_audio: usize, n_text: usize, num_layers: usize, d_k: usize) -> Self {
        Self {
            n_video,
            n_audio,
            n_text,
            num_layers,
            d_k,
            regime: Regime::Balanced,
            convergence_start_fraction: 0.5,
            av_key_mixing: 0.0,
            seed: 0,
        }
    }

    #[must_use]
    pub fn regime(mut self, regime: Regime) -> Self {
        self.regime = regime;
        self
    }

    #[must_use]
    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<ModalityLayout> {
        if !(0.0..=1.0).contains(&self.convergence_start_fraction) {
            return Err(Error::Config("convergence_start_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.av_key_mixing) {
            return Err(Error::Config("av_key_mixing must lie in [0, 1]".into()));
        }
        if self.d_k == 0 {
            return Err(Error::Config("d_k must be >= 1".into()));
        }
        build_layout(self.n_video, self.n_audio, self.n_text)
    }

    /// Whether `layer` falls in the high (converged) band.
    #[must_use]
    pub fn is_high_layer(&self, layer: usize) -> bool {
        layer as f64 >= self.convergence_start_fraction * self.num_layers as f64
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        [
            ("generator", "synthetic".to_string()),
            ("regime", self.regime.to_string()),
            ("seed", self.seed.to_string()),
            ("convergence_start_fraction", format!("{:?}", self.convergence_start_fraction)),
            ("av_key_mixing", format!("{:?}", self.av_key_mixing)),
            ("rng", "chacha20".to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

// ── Generation ──────────────────────────────────────────────────────────────

struct Draws(ChaCha20Rng);

impl Draws {
    fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn exponential(&mut self) -> f64 {
        -(1.0 - self.uniform()).ln()
    }

    fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Share of per-token text attention given to video in each band.
fn video_share(spec: &GeneratorSpec, layer: usize, d: &mut Draws) -> f64 {
    let balanced = 0.45 + 0.1 * d.uniform();
    match spec.regime {
        Regime::Uniform | Regime::Balanced => balanced,
        Regime::VideoConvergent if spec.is_high_layer(layer) => 0.85 + 0.1 * d.uniform(),
        Regime::AudioSalient if spec.is_high_layer(layer) => 0.05 + 0.1 * d.uniform(),
        Regime::VideoConvergent | Regime::AudioSalient => balanced,
    }
}

/// Fills row `i` with exponential weights over its prefix, normalised.
fn random_row(row: &mut [f64], i: usize, d: &mut Draws) {
    let mut total = 0.0;
    for v in row.iter_mut().take(i + 1) {
        *v = d.exponential();
        total += *v;
    }
    if total > 0.0 {
        row.iter_mut().take(i + 1).for_each(|v| *v /= total);
    } else {
        row[i] = 1.0;
    }
}

/// Text row whose *redistributed* entries give video tokens `share` of the
/// per-token mean mass. Entries are built in redistributed space and mapped
/// back through the inverse weight `(l - j) / (i + 1)`; row normalisation
/// rescales every column equally, so the per-token ratio survives.
fn text_row(row: &mut [f64], i: usize, layout: &ModalityLayout, share: f64, d: &mut Draws) {
    let l = layout.seq_len();
    let (nv, na) = (layout.n_video() as f64, layout.n_audio() as f64);
    // Redistributed mass: 0.8 split across modalities, 0.2 on visible text.
    let denom = share * nv + (1.0 - share) * na;
    let (mass_v, mass_a) =
        if denom > 0.0 { (0.8 * share * nv / denom, 0.8 * (1.0 - share) * na / denom) } else { (0.0, 0.0) };
    let blocks = [(layout.video(), mass_v), (layout.audio(), mass_a), (layout.text().start..i + 1, 0.2)];
    for (cols, mass) in blocks {
        let weights: Vec<f64> = cols.clone().map(|_| d.exponential()).collect();
        let total: f64 = weights.iter().sum();
        for (j, w) in cols.zip(weights) {
            let redistributed = if total > 0.0 { mass * w / total } else { 0.0 };
            row[j] = redistributed * (l - j) as f64 / (i + 1) as f64;
        }
    }
    let total: f64 = row.iter().take(i + 1).sum();
    row.iter_mut().take(i + 1).for_each(|v| *v /= total);
}

fn attention_for(spec: &GeneratorSpec, layout: &ModalityLayout, layer: usize, d: &mut Draws) -> Array2<f64> {
    let l = layout.seq_len();
    let mut m = Array2::<f64>::zeros((l, l));
    if spec.regime == Regime::Uniform {
        for i in 0..l {
            m.row_mut(i).iter_mut().take(i + 1).for_each(|v| *v = 1.0 / (i + 1) as f64);
        }
        return m;
    }
    let share = video_share(spec, layer, d);
    for i in 0..l {
        let mut row = vec![0.0; l];
        if layout.text().contains(&i) {
            text_row(&mut row, i, layout, share, d);
        } else {
            random_row(&mut row, i, d);
        }
        m.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
    }
    m
}

fn kv_for(spec: &GeneratorSpec, layout: &ModalityLayout, d: &mut Draws) -> Result<LayerKV> {
    let (l, d_k) = (layout.seq_len(), spec.d_k);
    let mut keys = Array2::from_shape_simple_fn((l, d_k), || d.normal());
    let values = Array2::from_shape_simple_fn((l, d_k), || d.normal());
    let rho = spec.av_key_mixing;
    if rho > 0.0 && layout.n_video() > 0 {
        let noise = (1.0 - rho * rho).sqrt();
        for (n, j) in layout.audio().enumerate() {
            let paired = layout.video().start + n % layout.n_video();
            let v = keys.row(paired).to_owned();
            let mut a = keys.row_mut(j);
            a.zip_mut_with(&v, |a, v| *a = rho * v + noise * *a);
        }
    }
    LayerKV::new(keys, values)
}

/// Deterministic synthetic trace for `spec`.
pub fn generate_trace(spec: &GeneratorSpec) -> Result<Trace> {
    let layout = spec.validate()?;
    let mut d = Draws(ChaCha20Rng::seed_from_u64(spec.seed));
    let mut layers = Vec::with_capacity(spec.num_layers);
    for layer in 0..spec.num_layers {
        let attention = AttentionMatrix::validate(attention_for(spec, &layout, layer, &mut d))?;
        let kv = kv_for(spec, &layout, &mut d)?;
        layers.push(TraceLayer { attention, kv });
    }
    Trace::new(layout, spec.d_k, layers, spec.metadata())
}

// ── I/O ─────────────────────────────────────────────────────────────────────

fn check_meta(s: &str, what: &str) -> Result<()> {
    if s.contains(['\n', '\r']) || (what == "key" && (s.contains('=') || s.is_empty())) {
        return Err(Error::Format(format!("metadata {what} {s:?} cannot be encoded")));
    }
    Ok(())
}

pub fn write_trace_to<W: Write>(t: &Trace, mut w: W) -> Result<()> {
    let lay = &t.layout;
    writeln!(w, "{MAGIC} {FORMAT_VERSION}")?;
    writeln!(w, "num_layers={}", t.num_layers())?;
    writeln!(w, "n_video={}", lay.n_video())?;
    writeln!(w, "n_audio={}", lay.n_audio())?;
    writeln!(w, "n_text={}", lay.n_text())?;
    writeln!(w, "d_k={}", t.d_k)?;
    for (k, v) in &t.metadata {
        check_meta(k, "key")?;
        check_meta(v, "value")?;
        writeln!(w, "meta.{k}={v}")?;
    }
    writeln!(w, "end")?;
    let mut buf = Vec::new();
    for layer in &t.layers {
        buf.clear();
        let blocks = [layer.attention.entries(), layer.kv.keys(), layer.kv.values()];
        for block in blocks {
            for v in block.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace(t: &Trace, path: impl AsRef<Path>) -> Result<()> {
    write_trace_to(t, BufWriter::new(File::create(path)?))
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    let n = r.read_line(&mut line).map_err(|e| match e.kind() {
        std::io::ErrorKind::InvalidData => Error::Format("header is not UTF-8".into()),
        _ => Error::Io(e),
    })?;
    if n == 0 || !line.ends_with('\n') {
        return Err(Error::Format("unexpected end of header".into()));
    }
    line.pop();
    Ok(line)
}

fn header_field<R: BufRead>(r: &mut R, key: &str) -> Result<usize> {
    let line = read_line(r)?;
    let value = line
        .strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| Error::Format(format!("expected {key}=, found {line:?}")))?;
    value.parse().map_err(|_| Error::Format(format!("bad {key} value {value:?}")))
}

fn read_block<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut bytes = vec![0u8; rows * cols * 8];
    r.read_exact(&mut bytes).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("payload truncated".into()),
        _ => Error::Io(e),
    })?;
    let data =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("block shape"))
}

pub fn read_trace_from<R: BufRead>(mut r: R) -> Result<Trace> {
    let first = read_line(&mut r)?;
    let version = first
        .strip_prefix(MAGIC)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| Error::Format("missing AVTRACE magic".into()))?;
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::Version { found: version.to_string(), expected: FORMAT_VERSION });
    }
    let num_layers = header_field(&mut r, "num_layers")?;
    let n_video = header_field(&mut r, "n_video")?;
    let n_audio = header_field(&mut r, "n_audio")?;
    let n_text = header_field(&mut r, "n_text")?;
    let d_k = header_field(&mut r, "d_k")?;
    let layout = build_layout(n_video, n_audio, n_text).map_err(|e| Error::Format(e.to_string()))?;

    let mut metadata = BTreeMap::new();
    loop {
        let line = read_line(&mut r)?;
        if line == "end" {
            break;
        }
        let (k, v) = line
            .strip_prefix("meta.")
            .and_then(|kv| kv.split_once('='))
            .ok_or_else(|| Error::Format(format!("unexpected header line {line:?}")))?;
        metadata.insert(k.to_string(), v.to_string());
    }

    let l = layout.seq_len();
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let attention = AttentionMatrix::validate(read_block(&mut r, l, l)?)?;
        let keys = read_block(&mut r, l, d_k)?;
        let values = read_block(&mut r, l, d_k)?;
        layers.push(TraceLayer { attention, kv: LayerKV::new(keys, values)? });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after last layer".into()));
    }
    Trace::new(layout, d_k, layers, metadata)
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Trace> {
    read_trace_from(BufReader::new(File::open(path)?))
}

// ── Compacted caches ────────────────────────────────────────────────────────

const KV_MAGIC: &str = "AVKV";

/// Writes compacted per-layer caches:
///
/// ```text
/// AVKV 1
/// num_layers=<u64>
/// d_k=<u64>
/// rows=<r0>,<r1>,...
/// end
/// <per layer: rows*d_k keys, then rows*d_k values, f64 little-endian>
/// ```
pub fn write_compacted_to<W: Write>(layers: &[LayerKV], d_k: usize, mut w: W) -> Result<()> {
    if let Some(bad) = layers.iter().find(|kv| kv.d_k() != d_k) {
        return Err(Error::Shape(format!("layer width {} != d_k {d_k}", bad.d_k())));
    }
    let rows: Vec<String> = layers.iter().map(|kv| kv.len().to_string()).collect();
    writeln!(w, "{KV_MAGIC} {FORMAT_VERSION}")?;
    writeln!(w, "num_layers={}", layers.len())?;
    writeln!(w, "d_k={d_k}")?;
    writeln!(w, "rows={}", rows.join(","))?;
    writeln!(w, "end")?;
    for kv in layers {
        let mut buf = Vec::with_capacity(kv.len() * d_k * 16);
        for v in kv.keys().iter().chain(kv.values().iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_compacted(layers: &[LayerKV], d_k: usize, path: impl AsRef<Path>) -> Result<()> {
    write_compacted_to(layers, d_k, BufWriter::new(File::create(path)?))
}

pub fn read_compacted_from<R: BufRead>(mut r: R) -> Result<Vec<LayerKV>> {
    let first = read_line(&mut r)?;
    let version = first
        .strip_prefix(KV_MAGIC)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| Error::Format("missing AVKV magic".into()))?;
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::Version { found: version.to_string(), expected: FORMAT_VERSION });
    }
    let num_layers = header_field(&mut r, "num_layers")?;
    let d_k = header_field(&mut r, "d_k")?;
    let line = read_line(&mut r)?;
    let rows: Vec<usize> = match line.strip_prefix("rows=") {
        Some("") => Vec::new(),
        Some(list) => list
            .split(',')
            .map(|x| x.parse().map_err(|_| Error::Format(format!("bad row count {x:?}"))))
            .collect::<Result<_>>()?,
        None => return Err(Error::Format(format!("expected rows=, found {line:?}"))),
    };
    if rows.len() != num_layers {
        return Err(Error::Format("row list length differs from num_layers".into()));
    }
    if read_line(&mut r)? != "end" {
        return Err(Error::Format("missing end of header".into()));
    }
    let mut out = Vec::with_capacity(num_layers);
    for &n in &rows {
        let keys = read_block(&mut r, n, d_k)?;
        let values = read_block(&mut r, n, d_k)?;
        out.push(LayerKV::new(keys, values)?);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after last layer".into()));
    }
    Ok(out)
}

pub fn read_compacted(path: impl AsRef<Path>) -> Result<Vec<LayerKV>> {
    read_compacted_from(BufReader::new(File::open(path)?))
}
