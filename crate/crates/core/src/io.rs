//! File formats: binary tensors, plain-text manifests and model files.
//!
//! # Tensor files
//!
//! ```text
//! offset  size        field
//! 0       8           magic "SFTENS01"
//! 8       4           rank r (u32 LE)
//! 12      8 r         dims (u64 LE each)
//! 12+8r   1           dtype: 1 = f32, 2 = u16
//! 13+8r   ...         payload, row-major, little-endian
//! ```
//!
//! Score maps are rank 3 `(class, height, width)`, label maps rank 2
//! `(height, width)` and Monte-Carlo sample stacks rank 4
//! `(sample, class, height, width)`.
//!
//! # Manifests
//!
//! One `expert_id<TAB>scores_dir` line per expert and exactly one
//! `gt<TAB>labels_dir` line. Blank lines and lines starting with `#` are
//! skipped. Relative directories are resolved against the manifest's own
//! directory. Files are paired across directories by identical file name.
//!
//! # Model files
//!
//! Line-oriented text, tokens separated by single spaces:
//!
//! ```text
//! statfuse-model v1
//! classes <K>
//! names <name_0> ... <name_K-1>
//! ignore <index | none>
//! beta <real>
//! delta <real>
//! smoothing <real>
//! prior <K log-probabilities>
//! experts <M>
//! expert <id>                     (M blocks from here)
//! confusion                       followed by K rows of K counts
//! dirichlet <present | absent>
//! alpha <class> <fit | mle-fallback | absent> <K reals>   (K lines if present)
//! end
//! ```
//!
//! Reals are written with 17 significant digits, which round-trips every
//! `f64` exactly. Blank lines and `#` comments are allowed when reading.

use std::fs;
use std::path::{Path, PathBuf};

use crate::domain::{
    AlphaSource, ClassPrior, ClassSet, ConfusionMatrix, DirichletModel, ExpertModel, FusionModel, LabelMap, ScoreMap,
};
use crate::error::{Error, Result};
use crate::fusion::SampleStack;

pub const MAGIC: &[u8; 8] = b"SFTENS01";
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_U16: u8 = 2;
/// Largest distance of a stored score vector from the simplex that is
/// still repaired by clipping and renormalizing.
pub const SIMPLEX_READ_TOLERANCE: f64 = 1e-3;
/// File extension used for tensors written by the command-line tool.
pub const TENSOR_EXTENSION: &str = "sft";

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn header(dims: &[u64], dtype: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 8 * dims.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(dtype);
    out
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Score payload in `(class, height, width)` order.
fn push_scores(out: &mut Vec<u8>, map: &ScoreMap) {
    let k = map.classes();
    let data = map.as_slice();
    out.reserve(data.len() * 4);
    for c in 0..k {
        for i in 0..map.len() {
            out.extend_from_slice(&data[i * k + c].to_le_bytes());
        }
    }
}

pub fn score_map_bytes(map: &ScoreMap) -> Vec<u8> {
    let mut out = header(
        &[map.classes() as u64, map.height() as u64, map.width() as u64],
        DTYPE_F32,
    );
    push_scores(&mut out, map);
    out
}

pub fn label_map_bytes(map: &LabelMap) -> Vec<u8> {
    let mut out = header(&[map.height() as u64, map.width() as u64], DTYPE_U16);
    out.reserve(map.len() * 2);
    for &l in map.as_slice() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn sample_stack_bytes(stack: &SampleStack) -> Vec<u8> {
    let first = &stack.samples()[0];
    let dims = [
        stack.samples().len() as u64,
        first.classes() as u64,
        first.height() as u64,
        first.width() as u64,
    ];
    let mut out = header(&dims, DTYPE_F32);
    for s in stack.samples() {
        push_scores(&mut out, s);
    }
    out
}

pub fn write_score_map(path: &Path, map: &ScoreMap) -> Result<()> {
    write_bytes(path, &score_map_bytes(map))
}

pub fn write_label_map(path: &Path, map: &LabelMap) -> Result<()> {
    write_bytes(path, &label_map_bytes(map))
}

pub fn write_sample_stack(path: &Path, stack: &SampleStack) -> Result<()> {
    write_bytes(path, &sample_stack_bytes(stack))
}

/// Decoded tensor file.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Scores(ScoreMap),
    Labels(LabelMap),
    /// Monte-Carlo samples, unnamed until attached to an expert.
    Samples(Vec<ScoreMap>),
}

impl Tensor {
    fn kind(&self) -> &'static str {
        match self {
            Tensor::Scores(_) => "a score map",
            Tensor::Labels(_) => "a label map",
            Tensor::Samples(_) => "a sample stack",
        }
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                format_err(
                    self.path,
                    format!(
                        "offset {}: truncated {what} ({n} bytes needed, {} left)",
                        self.pos,
                        self.bytes.len() - self.pos
                    ),
                )
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

fn element_count(path: &Path, dims: &[u64]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| {
            usize::try_from(d).ok().and_then(|d| acc.checked_mul(d))
        })
        .ok_or_else(|| format_err(path, "offset 12: dimensions overflow"))
}

fn decode_scores(path: &Path, payload_offset: usize, raw: &[f32], k: usize, h: usize, w: usize) -> Result<ScoreMap> {
    let n = h * w;
    let mut data = vec![0.0f32; n * k];
    for c in 0..k {
        for i in 0..n {
            data[i * k + c] = raw[c * n + i];
        }
    }
    ScoreMap::from_raw_renormalized(h, w, k, data, SIMPLEX_READ_TOLERANCE).map_err(|(i, msg)| {
        format_err(
            path,
            format!(
                "element {i} (row {}, column {}, first byte at offset {}): {msg}",
                i / w.max(1),
                i % w.max(1),
                payload_offset + 4 * i
            ),
        )
    })
}

pub fn decode_tensor(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { path, bytes, pos: 0 };
    let magic = cur.take(8, "magic")?;
    if magic != MAGIC {
        return Err(format_err(
            path,
            format!("offset 0: bad magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let rank = u32::from_le_bytes(cur.take(4, "rank")?.try_into().expect("4 bytes"));
    if !(2..=4).contains(&rank) {
        return Err(format_err(path, format!("offset 8: unsupported rank {rank}")));
    }
    let dims: Vec<u64> = (0..rank)
        .map(|_| {
            cur.take(8, "dimension")
                .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        })
        .collect::<Result<_>>()?;
    let dtype_offset = cur.pos;
    let dtype = cur.take(1, "dtype")?[0];
    let count = element_count(path, &dims)?;
    let size = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U16 => 2,
        other => {
            return Err(format_err(
                path,
                format!("offset {dtype_offset}: unknown dtype {other}"),
            ))
        }
    };
    let payload_offset = cur.pos;
    let payload = cur.take(
        count
            .checked_mul(size)
            .ok_or_else(|| format_err(path, "payload size overflows"))?,
        "payload",
    )?;
    if cur.pos != bytes.len() {
        return Err(format_err(
            path,
            format!("offset {}: {} trailing bytes", cur.pos, bytes.len() - cur.pos),
        ));
    }
    let d: Vec<usize> = dims.iter().map(|&v| v as usize).collect();
    match (rank, dtype) {
        (2, DTYPE_U16) => {
            let labels = payload
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]))
                .collect();
            Ok(Tensor::Labels(
                LabelMap::new(d[0], d[1], labels).map_err(|e| format_err(path, e.to_string()))?,
            ))
        }
        (3, DTYPE_F32) | (4, DTYPE_F32) => {
            let raw: Vec<f32> = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let (t, k, h, w) = if rank == 3 {
                (1, d[0], d[1], d[2])
            } else {
                (d[0], d[1], d[2], d[3])
            };
            if k == 0 || h == 0 || w == 0 || t == 0 {
                return Err(format_err(path, "offset 12: zero-sized dimension"));
            }
            let per = k * h * w;
            let maps = (0..t)
                .map(|s| {
                    decode_scores(
                        path,
                        payload_offset + 4 * s * per,
                        &raw[s * per..(s + 1) * per],
                        k,
                        h,
                        w,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(if rank == 3 {
                Tensor::Scores(maps.into_iter().next().expect("one map"))
            } else {
                Tensor::Samples(maps)
            })
        }
        _ => Err(format_err(
            path,
            format!("offset {dtype_offset}: dtype {dtype} is not valid for rank {rank}"),
        )),
    }
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(path, &bytes)
}

/// Reads a score map. A sample stack is accepted and reduced to its mean.
pub fn read_score_map(path: &Path) -> Result<ScoreMap> {
    match read_tensor(path)? {
        Tensor::Scores(s) => Ok(s),
        Tensor::Samples(s) if s.len() >= 2 => Ok(SampleStack::new("", s)?.mean_map()),
        Tensor::Samples(mut s) => Ok(s.remove(0)),
        other => Err(format_err(
            path,
            format!("expected a score map, found {}", other.kind()),
        )),
    }
}

pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    match read_tensor(path)? {
        Tensor::Labels(l) => Ok(l),
        other => Err(format_err(
            path,
            format!("expected a label map, found {}", other.kind()),
        )),
    }
}

pub fn read_sample_stack(path: &Path, id: &str) -> Result<SampleStack> {
    match read_tensor(path)? {
        Tensor::Samples(s) => SampleStack::new(id, s).map_err(|e| format_err(path, e.to_string())),
        other => Err(format_err(
            path,
            format!("expected a sample stack, found {}", other.kind()),
        )),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// `(expert id, scores directory)` in file order.
    pub experts: Vec<(String, PathBuf)>,
    pub gt: PathBuf,
}

impl Manifest {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new(""));
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut experts: Vec<(String, PathBuf)> = Vec::new();
        let mut gt: Option<PathBuf> = None;
        let mut last = 0;
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            last = line_no;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, dir) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(line_no, "expected `id<TAB>directory`".into()))?;
            if id.is_empty() || dir.is_empty() || id.chars().any(char::is_whitespace) || dir.contains('\t') {
                return Err(parse_err(line_no, format!("malformed entry {line:?}")));
            }
            let dir = base.join(dir);
            if id == "gt" {
                if gt.replace(dir).is_some() {
                    return Err(parse_err(line_no, "second `gt` line".into()));
                }
            } else {
                if experts.iter().any(|(e, _)| e == id) {
                    return Err(parse_err(line_no, format!("duplicate expert {id:?}")));
                }
                experts.push((id.to_string(), dir));
            }
        }
        let gt = gt.ok_or_else(|| parse_err(last.max(1), "missing `gt` line".into()))?;
        if experts.is_empty() {
            return Err(parse_err(last.max(1), "no expert lines".into()));
        }
        Ok(Manifest { experts, gt })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    /// Sorted file names in the ground-truth directory, after checking that
    /// every expert directory has a file of the same name.
    pub fn basenames(&self) -> Result<Vec<String>> {
        let names = list_tensor_files(&self.gt)?;
        for (id, dir) in &self.experts {
            for name in &names {
                if !dir.join(name).is_file() {
                    return Err(format_err(
                        &dir.join(name),
                        format!("expert {id:?} has no scores for ground-truth file {name:?}"),
                    ));
                }
            }
        }
        Ok(names)
    }
}

/// Sorted names of the regular files in `dir` carrying the tensor extension.
pub fn list_tensor_files(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && path.extension().is_some_and(|e| e == TENSOR_EXTENSION) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

pub const MODEL_HEADER: &str = "statfuse-model v1";

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn model_to_string(model: &FusionModel) -> Result<String> {
    use std::fmt::Write as _;
    model.validate()?;
    let k = model.class_set.len();
    let mut s = String::new();
    let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(" ");
    let _ = writeln!(s, "{MODEL_HEADER}");
    let _ = writeln!(s, "classes {k}");
    let _ = writeln!(s, "names {}", model.class_set.names().join(" "));
    match model.class_set.ignore_index() {
        Some(i) => writeln!(s, "ignore {i}"),
        None => writeln!(s, "ignore none"),
    }
    .expect("writing to a String");
    let _ = writeln!(s, "beta {}", real(model.beta));
    let _ = writeln!(s, "delta {}", real(model.delta));
    let _ = writeln!(s, "smoothing {}", real(model.smoothing));
    let _ = writeln!(
        s,
        "prior {}",
        join(&mut model.prior.log_probs().iter().map(|&v| real(v)))
    );
    let _ = writeln!(s, "experts {}", model.experts.len());
    for e in &model.experts {
        let _ = writeln!(s, "expert {}", e.id);
        let _ = writeln!(s, "confusion");
        for out in 0..k {
            let _ = writeln!(s, "{}", join(&mut e.confusion.row(out).iter().map(u64::to_string)));
        }
        match &e.dirichlet {
            None => {
                let _ = writeln!(s, "dirichlet absent");
            }
            Some(d) => {
                let _ = writeln!(s, "dirichlet present");
                for c in 0..k {
                    let _ = writeln!(
                        s,
                        "alpha {c} {} {}",
                        d.source(c).as_str(),
                        join(&mut d.alpha(c).iter().map(|&v| real(v)))
                    );
                }
            }
        }
    }
    let _ = writeln!(s, "end");
    Ok(s)
}

pub fn save_model(path: &Path, model: &FusionModel) -> Result<()> {
    write_bytes(path, model_to_string(model)?.as_bytes())
}

struct Lines<'a> {
    path: &'a Path,
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    /// Next significant line as `(line number, tokens)`.
    fn next(&mut self, expecting: &str) -> Result<(usize, Vec<&'a str>)> {
        for (n, raw) in self.inner.by_ref() {
            self.last = n + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            return Ok((n + 1, line.split_whitespace().collect()));
        }
        Err(self.err(self.last + 1, format!("unexpected end of file, expected {expecting}")))
    }

    /// Next line, which must start with `key`; returns the remaining tokens.
    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (line, tokens) = self.next(&format!("`{key}` line"))?;
        if tokens.first() != Some(&key) {
            return Err(self.err(
                line,
                format!("expected `{key}` line, found {:?}", tokens.first().unwrap_or(&"")),
            ));
        }
        Ok((line, tokens[1..].to_vec()))
    }

    fn single<T: std::str::FromStr>(&mut self, key: &str) -> Result<(usize, T)> {
        let (line, rest) = self.keyed(key)?;
        if rest.len() != 1 {
            return Err(self.err(line, format!("`{key}` takes one value")));
        }
        let v = rest[0]
            .parse()
            .map_err(|_| self.err(line, format!("invalid `{key}` value {:?}", rest[0])))?;
        Ok((line, v))
    }

    fn numbers<T: std::str::FromStr>(&self, line: usize, tokens: &[&str], k: usize, what: &str) -> Result<Vec<T>> {
        if tokens.len() != k {
            return Err(self.err(line, format!("{what}: expected {k} values, found {}", tokens.len())));
        }
        tokens
            .iter()
            .map(|t| {
                t.parse()
                    .map_err(|_| self.err(line, format!("{what}: invalid number {t:?}")))
            })
            .collect()
    }
}

pub fn parse_model(path: &Path, text: &str) -> Result<FusionModel> {
    let mut lines = Lines {
        path,
        inner: text.lines().enumerate().peekable(),
        last: 0,
    };
    let (line, tokens) = lines.next("header")?;
    if tokens.join(" ") != MODEL_HEADER {
        return Err(lines.err(line, format!("expected header {MODEL_HEADER:?}")));
    }
    let (kline, k) = lines.single::<usize>("classes")?;
    let (nline, names) = lines.keyed("names")?;
    let (iline, ignore) = lines.single::<String>("ignore")?;
    let ignore = match ignore.as_str() {
        "none" => None,
        v => Some(
            v.parse::<usize>()
                .map_err(|_| lines.err(iline, format!("invalid ignore index {v:?}")))?,
        ),
    };
    if names.len() != k {
        return Err(lines.err(nline, format!("{} names for {k} classes", names.len())));
    }
    let class_set = ClassSet::new(names.iter().map(|s| s.to_string()).collect(), ignore)
        .map_err(|e| lines.err(kline, e.to_string()))?;
    let (_, beta) = lines.single::<f64>("beta")?;
    let (_, delta) = lines.single::<f64>("delta")?;
    let (_, smoothing) = lines.single::<f64>("smoothing")?;
    let (pline, prior) = lines.keyed("prior")?;
    let prior = ClassPrior::from_log_probs(lines.numbers(pline, &prior, k, "prior")?)
        .map_err(|e| lines.err(pline, e.to_string()))?;
    let (eline, count) = lines.single::<usize>("experts")?;
    if count == 0 {
        return Err(lines.err(eline, "a model needs at least one expert"));
    }
    let mut experts = Vec::with_capacity(count);
    for _ in 0..count {
        let (xline, id) = lines.single::<String>("expert")?;
        if experts.iter().any(|e: &ExpertModel| e.id == id) {
            return Err(lines.err(xline, format!("duplicate expert {id:?}")));
        }
        lines.keyed("confusion")?;
        let mut rows = Vec::with_capacity(k);
        for r in 0..k {
            let (line, tokens) = lines.next("confusion row")?;
            rows.push(lines.numbers::<u64>(line, &tokens, k, &format!("confusion row {r}"))?);
        }
        let confusion = ConfusionMatrix::from_rows(&rows).map_err(|e| lines.err(xline, e.to_string()))?;
        let (dline, state) = lines.single::<String>("dirichlet")?;
        let dirichlet = match state.as_str() {
            "absent" => None,
            "present" => {
                let mut alphas = Vec::with_capacity(k);
                let mut sources = Vec::with_capacity(k);
                for c in 0..k {
                    let (aline, tokens) = lines.keyed("alpha")?;
                    if tokens.len() < 2 || tokens[0] != c.to_string() {
                        return Err(lines.err(aline, format!("expected `alpha {c} <source> <values>`")));
                    }
                    let source = AlphaSource::parse(tokens[1])
                        .ok_or_else(|| lines.err(aline, format!("unknown alpha source {:?}", tokens[1])))?;
                    let alpha = lines.numbers::<f64>(aline, &tokens[2..], k, "alpha")?;
                    alphas.push(alpha);
                    sources.push(source);
                }
                Some(DirichletModel::new(alphas, sources).map_err(|e| lines.err(dline, e.to_string()))?)
            }
            other => return Err(lines.err(dline, format!("expected `present` or `absent`, found {other:?}"))),
        };
        experts.push(ExpertModel {
            id,
            confusion,
            dirichlet,
        });
    }
    let (endline, rest) = lines.keyed("end")?;
    if !rest.is_empty() {
        return Err(lines.err(endline, "trailing tokens after `end`"));
    }
    if let Ok((line, _)) = lines.next("nothing") {
        return Err(lines.err(line, "content after `end`"));
    }
    let model = FusionModel {
        class_set,
        experts,
        prior,
        beta,
        delta,
        smoothing,
    };
    model.validate().map_err(|e| lines.err(endline, e.to_string()))?;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<FusionModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_model(path, &text)
}
