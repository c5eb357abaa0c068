//! Eight-stage residual vector quantizer.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::frames::{FrameConfig, FrameMatrix};
use crate::error::{Error, Result};
use crate::nn::Tensor2;

pub const STAGES: usize = 8;
pub const KMEANS_ITERATIONS: usize = 30;
/// Training frames beyond this count are subsampled (seeded) before k-means.
pub const MAX_FIT_FRAMES: usize = 20_000;

const BOOKS_MAGIC: &[u8; 4] = b"RVQ1";

/// Integer codes, one row per quantizer stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedTokenGrid {
    codes: Vec<Vec<u32>>,
    codebook_size: usize,
}

impl QuantizedTokenGrid {
    pub fn new(codes: Vec<Vec<u32>>, codebook_size: usize) -> Result<Self> {
        if codes.len() != STAGES {
            return Err(Error::ShapeMismatch(format!(
                "{} stages, expected {STAGES}",
                codes.len()
            )));
        }
        let len = codes[0].len();
        for (s, row) in codes.iter().enumerate() {
            if row.len() != len {
                return Err(Error::ShapeMismatch(format!(
                    "stage {s} has {} frames, stage 0 has {len}",
                    row.len()
                )));
            }
            if let Some(&c) = row.iter().find(|&&c| c as usize >= codebook_size) {
                return Err(Error::CodeOutOfRange {
                    stage: s,
                    code: c as usize,
                    size: codebook_size,
                });
            }
        }
        Ok(Self {
            codes,
            codebook_size,
        })
    }

    pub fn len(&self) -> usize {
        self.codes[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn stage(&self, s: usize) -> &[u32] {
        &self.codes[s]
    }

    pub fn stages(&self) -> &[Vec<u32>] {
        &self.codes
    }

    /// Frames `start..end` of every stage.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            codes: self.codes.iter().map(|r| r[start..end].to_vec()).collect(),
            codebook_size: self.codebook_size,
        }
    }

    /// Concatenate along time.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.codebook_size != other.codebook_size {
            return Err(Error::DimensionMismatch {
                expected: self.codebook_size,
                got: other.codebook_size,
            });
        }
        Ok(Self {
            codes: self
                .codes
                .iter()
                .zip(&other.codes)
                .map(|(a, b)| a.iter().chain(b).copied().collect())
                .collect(),
            codebook_size: self.codebook_size,
        })
    }

    /// Text form: a `stages=8 L=.. K=..` header then one line per stage.
    pub fn to_text(&self) -> String {
        let mut out = format!("stages={STAGES} L={} K={}\n", self.len(), self.codebook_size);
        for row in &self.codes {
            let mut first = true;
            for c in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                write!(out, "{c}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format(path, "empty file"))?;
        let mut stages = None;
        let mut len = None;
        let mut k = None;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("bad header field `{field}`")))?;
            let value: usize = value
                .parse()
                .map_err(|_| Error::format(path, format!("bad header value `{field}`")))?;
            match key {
                "stages" => stages = Some(value),
                "L" => len = Some(value),
                "K" => k = Some(value),
                _ => return Err(Error::format(path, format!("unknown header key `{key}`"))),
            }
        }
        let (Some(stages), Some(len), Some(k)) = (stages, len, k) else {
            return Err(Error::format(path, "header needs stages, L and K"));
        };
        if stages != STAGES {
            return Err(Error::format(path, format!("{stages} stages, expected {STAGES}")));
        }
        let mut codes = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(path, format!("missing stage {s}")))?;
            let row: Vec<u32> = line
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(path, format!("bad code on stage {s}")))?;
            if row.len() != len {
                return Err(Error::format(
                    path,
                    format!("stage {s} has {} codes, header says {len}", row.len()),
                ));
            }
            codes.push(row);
        }
        Self::new(codes, k)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// One `K x D_f` codebook per stage plus the frame geometry they were fit on.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    pub books: Vec<Tensor2<f64>>,
    pub frame: FrameConfig,
}

impl CodebookSet {
    pub fn size(&self) -> usize {
        self.books[0].rows()
    }

    pub fn dims(&self) -> usize {
        self.books[0].cols()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        buf.extend_from_slice(BOOKS_MAGIC);
        for v in [STAGES, self.size(), self.dims()] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let f = &self.frame;
        for v in [f.sample_rate as usize, f.frame_size, f.hop] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&f.f_min.to_le_bytes());
        buf.extend_from_slice(&f.f_max.to_le_bytes());
        for b in &self.books {
            for v in b.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader { bytes: &bytes, pos: 0, path };
        if r.take(4)? != BOOKS_MAGIC {
            return Err(Error::format(path, "missing RVQ1 magic"));
        }
        let stages = r.u32()? as usize;
        let k = r.u32()? as usize;
        let dims = r.u32()? as usize;
        if stages != STAGES || k == 0 || dims == 0 {
            return Err(Error::format(path, format!("bad dims {stages}x{k}x{dims}")));
        }
        let frame = FrameConfig {
            sample_rate: r.u32()?,
            frame_size: r.u32()? as usize,
            hop: r.u32()? as usize,
            bands: dims,
            f_min: r.f64()?,
            f_max: r.f64()?,
        };
        let mut books = Vec::with_capacity(stages);
        for _ in 0..stages {
            let mut data = Vec::with_capacity(k * dims);
            for _ in 0..k * dims {
                data.push(r.f64()?);
            }
            books.push(Tensor2::from_vec(k, dims, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        if books.iter().any(|b| !b.is_finite()) {
            return Err(Error::format(path, "non-finite codebook entry"));
        }
        Ok(Self { books, frame })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row, lowest index on ties.
#[inline]
fn nearest(book: &Tensor2<f64>, v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..book.rows() {
        let d = sq_dist(book.row(k), v);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub codebook_size: usize,
    pub iterations: usize,
    pub max_frames: usize,
    pub seed: u64,
}

impl FitOptions {
    pub fn new(codebook_size: usize, seed: u64) -> Self {
        Self {
            codebook_size,
            iterations: KMEANS_ITERATIONS,
            max_frames: MAX_FIT_FRAMES,
            seed,
        }
    }
}

pub fn fit_codebooks(
    training: &[FrameMatrix],
    cfg: &FrameConfig,
    codebook_size: usize,
    seed: u64,
) -> Result<CodebookSet> {
    fit_codebooks_with(training, cfg, &FitOptions::new(codebook_size, seed))
}

/// Stage-wise k-means on residuals.
///
/// Row 0 of every codebook after the first is pinned to zero, so each stage
/// can only shrink a residual.
pub fn fit_codebooks_with(
    training: &[FrameMatrix],
    cfg: &FrameConfig,
    opts: &FitOptions,
) -> Result<CodebookSet> {
    let k = opts.codebook_size;
    if k == 0 {
        return Err(Error::Config("codebook size must be positive".into()));
    }
    let dims = cfg.bands;
    let mut data: Vec<f64> = Vec::new();
    for fm in training {
        if fm.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: fm.dims(),
            });
        }
        data.extend_from_slice(fm.frames.data());
    }
    let mut n = data.len() / dims;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    if n > opts.max_frames {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(opts.max_frames);
        idx.sort_unstable();
        data = idx
            .iter()
            .flat_map(|&i| data[i * dims..(i + 1) * dims].iter().copied())
            .collect();
        n = opts.max_frames;
    }
    let mut residual = Tensor2::from_vec(n, dims, data)?;
    if count_distinct(&residual, k) < k {
        return Err(Error::InsufficientData(format!(
            "need {k} distinct training frames"
        )));
    }
    let mut books = Vec::with_capacity(STAGES);
    for stage in 0..STAGES {
        let book = kmeans(&residual, k, stage > 0, opts.iterations, &mut rng);
        for t in 0..n {
            let (c, _) = nearest(&book, residual.row(t));
            let centroid = book.row(c).to_vec();
            for (r, c) in residual.row_mut(t).iter_mut().zip(&centroid) {
                *r -= c;
            }
        }
        books.push(book);
    }
    Ok(CodebookSet {
        books,
        frame: cfg.clone(),
    })
}

fn count_distinct(x: &Tensor2<f64>, cap: usize) -> usize {
    let mut seen: Vec<&[f64]> = Vec::new();
    for t in 0..x.rows() {
        let r = x.row(t);
        if !seen.contains(&r) {
            seen.push(r);
            if seen.len() >= cap {
                break;
            }
        }
    }
    seen.len()
}

fn kmeans(
    x: &Tensor2<f64>,
    k: usize,
    pin_zero: bool,
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor2<f64> {
    let (n, dims) = x.shape();
    let first = usize::from(pin_zero);
    let mut book = Tensor2::zeros(k, dims);
    // Seeded init from distinct vectors, in a shuffled order.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut next = first;
    for &i in &order {
        if next == k {
            break;
        }
        let v = x.row(i);
        if pin_zero && v.iter().all(|&a| a == 0.0) {
            continue;
        }
        if (0..next).any(|j| book.row(j) == v) {
            continue;
        }
        book.row_mut(next).copy_from_slice(v);
        next += 1;
    }
    // Fewer distinct residuals than rows: fill with copies, which stay dead
    // because ties resolve to the lowest index.
    for j in next..k {
        let src = if next > first { first + (j - next) % (next - first) } else { 0 };
        let row = book.row(src).to_vec();
        book.row_mut(j).copy_from_slice(&row);
    }

    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    for _ in 0..iterations {
        let mut counts = vec![0usize; k];
        for t in 0..n {
            let (c, d) = nearest(&book, x.row(t));
            assign[t] = c;
            dist[t] = d;
            counts[c] += 1;
        }
        // Dead rows move to the worst-served vector.
        for j in first..k {
            if counts[j] > 0 {
                continue;
            }
            let mut far = None;
            let mut far_d = 0.0;
            for t in 0..n {
                if dist[t] > far_d && counts[assign[t]] > 1 {
                    far = Some(t);
                    far_d = dist[t];
                }
            }
            let Some(t) = far else { break };
            counts[assign[t]] -= 1;
            assign[t] = j;
            dist[t] = 0.0;
            counts[j] = 1;
            book.row_mut(j).copy_from_slice(x.row(t));
        }
        let mut sums = Tensor2::<f64>::zeros(k, dims);
        for t in 0..n {
            for (s, v) in sums.row_mut(assign[t]).iter_mut().zip(x.row(t)) {
                *s += v;
            }
        }
        let mut moved = false;
        for j in first..k {
            if counts[j] == 0 {
                continue;
            }
            let inv = 1.0 / counts[j] as f64;
            for (b, s) in book.row_mut(j).iter_mut().zip(sums.row(j)) {
                let v = s * inv;
                moved |= *b != v;
                *b = v;
            }
        }
        if !moved {
            break;
        }
    }
    book
}

pub fn rvq_encode(frames: &FrameMatrix, books: &CodebookSet) -> Result<QuantizedTokenGrid> {
    if frames.dims() != books.dims() {
        return Err(Error::DimensionMismatch {
            expected: books.dims(),
            got: frames.dims(),
        });
    }
    let mut codes = vec![Vec::with_capacity(frames.len()); STAGES];
    let mut r = vec![0.0; frames.dims()];
    for t in 0..frames.len() {
        r.copy_from_slice(frames.row(t));
        for (s, book) in books.books.iter().enumerate() {
            let (c, _) = nearest(book, &r);
            for (a, b) in r.iter_mut().zip(book.row(c)) {
                *a -= b;
            }
            codes[s].push(c as u32);
        }
    }
    QuantizedTokenGrid::new(codes, books.size())
}

/// Residual energy `sum_t |r_s[t]|^2` before each stage and after the last.
pub fn residual_energies(frames: &FrameMatrix, books: &CodebookSet) -> Result<Vec<Vec<f64>>> {
    let grid = rvq_encode(frames, books)?;
    let mut out = Vec::with_capacity(frames.len());
    for t in 0..frames.len() {
        let mut r = frames.row(t).to_vec();
        let mut norms = vec![r.iter().map(|v| v * v).sum::<f64>()];
        for (s, book) in books.books.iter().enumerate() {
            for (a, b) in r.iter_mut().zip(book.row(grid.stage(s)[t] as usize)) {
                *a -= b;
            }
            norms.push(r.iter().map(|v| v * v).sum());
        }
        out.push(norms);
    }
    Ok(out)
}

pub fn rvq_decode(
    codes: &QuantizedTokenGrid,
    books: &CodebookSet,
    stages: usize,
) -> Result<FrameMatrix> {
    if !(1..=STAGES).contains(&stages) {
        return Err(Error::InvalidStage(stages));
    }
    let k = books.size();
    let mut out = Tensor2::zeros(codes.len(), books.dims());
    for (s, book) in books.books.iter().enumerate().take(stages) {
        for (t, &c) in codes.stage(s).iter().enumerate() {
            let c = c as usize;
            if c >= k {
                return Err(Error::CodeOutOfRange {
                    stage: s,
                    code: c,
                    size: k,
                });
            }
            for (o, b) in out.row_mut(t).iter_mut().zip(book.row(c)) {
                *o += b;
            }
        }
    }
    Ok(FrameMatrix {
        frames: out,
        hop: books.frame.hop,
        frame_size: books.frame.frame_size,
    })
}
