//! JSONL records plus out-of-line binary feature tensors.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Comment, Corpus, CorpusError, FeatureTensor, Video};

/// `"VIC0"` read as a little-endian u32 header word.
pub const FEATURE_MAGIC: u32 = 0x5649_4330;

const VIDEOS_FILE: &str = "videos.jsonl";
const COMMENTS_FILE: &str = "comments.jsonl";

#[derive(Debug, Clone)]
pub struct CorpusFiles {
    pub videos: PathBuf,
    pub comments: PathBuf,
    pub features: Vec<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct VideoRecord {
    id: String,
    category: String,
    publish_time: i64,
    features_ref: String,
}

#[derive(Deserialize)]
struct CommentRecord {
    id: String,
    video_id: String,
    text: String,
    likes: i64,
    publish_time: i64,
    #[serde(default)]
    true_engagement: Option<f64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

pub fn load_corpus(videos_path: &Path, comments_path: &Path) -> Result<Corpus, CorpusError> {
    let base = videos_path.parent().unwrap_or_else(|| Path::new("."));
    let vpath = videos_path.display().to_string();
    let mut videos = Vec::new();
    for (line, text) in read_lines(videos_path)? {
        let rec: VideoRecord = serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
            path: vpath.clone(),
            line,
            reason: e.to_string(),
        })?;
        let features = read_features(&base.join(&rec.features_ref))
            .map_err(|reason| CorpusError::BadFeatures { video: rec.id.clone(), reason })?;
        videos.push(Video {
            id: rec.id,
            category: rec.category,
            publish_time: rec.publish_time,
            features,
        });
    }

    let cpath = comments_path.display().to_string();
    let mut comments = Vec::new();
    for (line, text) in read_lines(comments_path)? {
        let rec: CommentRecord = serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
            path: cpath.clone(),
            line,
            reason: e.to_string(),
        })?;
        if rec.likes < 0 {
            return Err(CorpusError::NegativeLikes {
                path: cpath.clone(),
                line,
                comment: rec.id,
                likes: rec.likes,
            });
        }
        if let Some(e) = rec.true_engagement {
            if !(0.0..=1.0).contains(&e) {
                return Err(CorpusError::Malformed {
                    path: cpath.clone(),
                    line,
                    reason: format!("true_engagement {e} outside [0, 1]"),
                });
            }
        }
        comments.push(Comment {
            id: rec.id,
            video_id: rec.video_id,
            text: rec.text,
            likes: rec.likes as u64,
            publish_time: rec.publish_time,
            true_engagement: rec.true_engagement,
        });
    }
    Corpus::new(videos, comments)
}

/// Writes `videos.jsonl`, `comments.jsonl` and one feature binary per video into `out_dir`.
pub fn write_corpus(corpus: &Corpus, out_dir: &Path) -> Result<CorpusFiles, CorpusError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let videos_path = out_dir.join(VIDEOS_FILE);
    let comments_path = out_dir.join(COMMENTS_FILE);

    let mut used = HashSet::new();
    let mut features = Vec::new();
    let file = File::create(&videos_path).map_err(io_err(&videos_path))?;
    let mut w = BufWriter::new(file);
    for v in corpus.videos() {
        let name = feature_file_name(&v.id, &mut used);
        let fpath = out_dir.join(&name);
        write_features(&fpath, &v.features).map_err(io_err(&fpath))?;
        features.push(fpath);
        let rec = VideoRecord {
            id: v.id.clone(),
            category: v.category.clone(),
            publish_time: v.publish_time,
            features_ref: name,
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(w, "{line}").map_err(io_err(&videos_path))?;
    }
    w.flush().map_err(io_err(&videos_path))?;

    let file = File::create(&comments_path).map_err(io_err(&comments_path))?;
    let mut w = BufWriter::new(file);
    for c in corpus.comments() {
        let line = serde_json::to_string(c).expect("record serializes");
        writeln!(w, "{line}").map_err(io_err(&comments_path))?;
    }
    w.flush().map_err(io_err(&comments_path))?;

    Ok(CorpusFiles { videos: videos_path, comments: comments_path, features })
}

fn feature_file_name(id: &str, used: &mut HashSet<String>) -> String {
    let stem: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    let mut name = format!("{stem}.feat");
    let mut n = 1;
    while !used.insert(name.clone()) {
        name = format!("{stem}~{n}.feat");
        n += 1;
    }
    name
}

fn write_features(path: &Path, f: &FeatureTensor) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * f.data.len());
    for word in [FEATURE_MAGIC, f.frames as u32, f.patches as u32, f.dim as u32] {
        buf.extend_from_slice(&word.to_le_bytes());
    }
    for x in &f.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf)
}

fn read_features(path: &Path) -> Result<FeatureTensor, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if bytes.len() < 16 {
        return Err(format!("{}: truncated header", path.display()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != FEATURE_MAGIC {
        return Err(format!("{}: bad magic {:#010x}", path.display(), word(0)));
    }
    let (t, l, d) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let body = &bytes[16..];
    if body.len() != 4 * t * l * d {
        return Err(format!(
            "{}: expected {} feature bytes for {t}x{l}x{d}, found {}",
            path.display(),
            4 * t * l * d,
            body.len()
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureTensor::new(t, l, d, data)
}
