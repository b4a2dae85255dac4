//! Videos, comments and the corpus that owns them.
//!
//! A [`Corpus`] is immutable once built: videos and comments are kept sorted by
//! id and a per-video index lists each video's comments in ascending id order.
//! Everything downstream (pair construction, uniqueness scoring, training)
//! relies on that ordering for determinism.

mod io;
mod synth;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use io::{load_corpus, write_corpus, CorpusFiles, FEATURE_MAGIC};
pub use synth::{generate_synthetic, SyntheticConfig};

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: malformed record: {reason}")]
    Malformed { path: String, line: usize, reason: String },
    #[error("{path}:{line}: comment {comment} has negative likes ({likes})")]
    NegativeLikes { path: String, line: usize, comment: String, likes: i64 },
    #[error("comment {comment} references unknown video {video}")]
    DanglingVideo { comment: String, video: String },
    #[error("comment {comment} published at {comment_time} before its video ({video_time})")]
    CommentBeforeVideo { comment: String, comment_time: i64, video_time: i64 },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: String },
    #[error("video {video}: {reason}")]
    BadFeatures { video: String, reason: String },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, #[source] source: std::io::Error },
}

/// Frame-major, patch-minor patch features of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    frames: usize,
    patches: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(frames: usize, patches: usize, dim: usize, data: Vec<f32>) -> Result<Self, String> {
        if frames == 0 || patches == 0 || dim == 0 {
            return Err(format!("degenerate feature shape {frames}x{patches}x{dim}"));
        }
        if data.len() != frames * patches * dim {
            return Err(format!(
                "feature data has {} values, shape {frames}x{patches}x{dim} needs {}",
                data.len(),
                frames * patches * dim
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err("non-finite feature value".into());
        }
        Ok(Self { frames, patches, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Feature vector of patch `patch` in frame `frame`.
    pub fn patch(&self, frame: usize, patch: usize) -> &[f32] {
        let start = (frame * self.patches + patch) * self.dim;
        &self.data[start..start + self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: String,
    pub category: String,
    pub publish_time: i64,
    pub features: FeatureTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comment {
    pub id: String,
    pub video_id: String,
    pub text: String,
    pub likes: u64,
    pub publish_time: i64,
    /// Planted ground truth; only evaluation code may read it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_engagement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    videos: Vec<Video>,
    comments: Vec<Comment>,
    video_index: HashMap<String, usize>,
    comment_index: HashMap<String, usize>,
    by_video: BTreeMap<String, Vec<usize>>,
}

impl Corpus {
    /// Builds a corpus, sorting both collections by id and validating every invariant.
    pub fn new(mut videos: Vec<Video>, mut comments: Vec<Comment>) -> Result<Self, CorpusError> {
        videos.sort_by(|a, b| a.id.cmp(&b.id));
        comments.sort_by(|a, b| a.id.cmp(&b.id));

        let mut video_index = HashMap::with_capacity(videos.len());
        for (i, v) in videos.iter().enumerate() {
            if video_index.insert(v.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId { kind: "video", id: v.id.clone() });
            }
        }
        let mut comment_index = HashMap::with_capacity(comments.len());
        let mut by_video: BTreeMap<String, Vec<usize>> =
            videos.iter().map(|v| (v.id.clone(), Vec::new())).collect();
        for (i, c) in comments.iter().enumerate() {
            if comment_index.insert(c.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId { kind: "comment", id: c.id.clone() });
            }
            let Some(&vi) = video_index.get(&c.video_id) else {
                return Err(CorpusError::DanglingVideo {
                    comment: c.id.clone(),
                    video: c.video_id.clone(),
                });
            };
            let video_time = videos[vi].publish_time;
            if c.publish_time < video_time {
                return Err(CorpusError::CommentBeforeVideo {
                    comment: c.id.clone(),
                    comment_time: c.publish_time,
                    video_time,
                });
            }
            by_video.get_mut(&c.video_id).expect("indexed above").push(i);
        }
        Ok(Self { videos, comments, video_index, comment_index, by_video })
    }

    pub fn empty() -> Self {
        Self::new(Vec::new(), Vec::new()).expect("empty corpus is valid")
    }

    pub fn videos(&self) -> &[Video] {
        &self.videos
    }

    pub fn comments(&self) -> &[Comment] {
        &self.comments
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn video(&self, id: &str) -> Option<&Video> {
        self.video_index.get(id).map(|&i| &self.videos[i])
    }

    pub fn video_position(&self, id: &str) -> Option<usize> {
        self.video_index.get(id).copied()
    }

    pub fn comment(&self, id: &str) -> Option<&Comment> {
        self.comment_index.get(id).map(|&i| &self.comments[i])
    }

    /// Comments of a video in ascending id order; empty for unknown ids.
    pub fn comments_of(&self, video_id: &str) -> Vec<&Comment> {
        self.by_video
            .get(video_id)
            .map(|ix| ix.iter().map(|&i| &self.comments[i]).collect())
            .unwrap_or_default()
    }

    /// Restriction of the corpus to the given videos (and their comments).
    pub fn subset(&self, video_ids: &[String]) -> Corpus {
        let keep: std::collections::HashSet<&str> = video_ids.iter().map(String::as_str).collect();
        let videos = self.videos.iter().filter(|v| keep.contains(v.id.as_str())).cloned().collect();
        let comments = self
            .comments
            .iter()
            .filter(|c| keep.contains(c.video_id.as_str()))
            .cloned()
            .collect();
        Corpus::new(videos, comments).expect("subset of a valid corpus is valid")
    }

    /// Content hash over every record and feature value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.videos {
            h.update(v.id.as_bytes());
            h.update([0]);
            h.update(v.category.as_bytes());
            h.update([0]);
            h.update(v.publish_time.to_le_bytes());
            for n in [v.features.frames, v.features.patches, v.features.dim] {
                h.update((n as u64).to_le_bytes());
            }
            for x in &v.features.data {
                h.update(x.to_le_bytes());
            }
        }
        for c in &self.comments {
            for s in [&c.id, &c.video_id, &c.text] {
                h.update(s.as_bytes());
                h.update([0]);
            }
            h.update(c.likes.to_le_bytes());
            h.update(c.publish_time.to_le_bytes());
            match c.true_engagement {
                Some(e) => h.update(e.to_le_bytes()),
                None => h.update([0xff]),
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(id: &str, t: i64) -> Video {
        Video {
            id: id.into(),
            category: "c".into(),
            publish_time: t,
            features: FeatureTensor::new(1, 1, 2, vec![0.5, -0.5]).unwrap(),
        }
    }

    fn comment(id: &str, vid: &str, t: i64) -> Comment {
        Comment {
            id: id.into(),
            video_id: vid.into(),
            text: "hello".into(),
            likes: 1,
            publish_time: t,
            true_engagement: None,
        }
    }

    #[test]
    fn rejects_dangling_and_early_comments() {
        let err = Corpus::new(vec![video("v1", 10)], vec![comment("c1", "v2", 10)]).unwrap_err();
        assert!(matches!(err, CorpusError::DanglingVideo { .. }));
        let err = Corpus::new(vec![video("v1", 10)], vec![comment("c1", "v1", 9)]).unwrap_err();
        assert!(matches!(err, CorpusError::CommentBeforeVideo { .. }));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let err = Corpus::new(vec![video("v1", 0), video("v1", 0)], vec![]).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId { kind: "video", .. }));
    }

    #[test]
    fn grouping_is_sorted_by_comment_id() {
        let c = Corpus::new(
            vec![video("v2", 0), video("v1", 0)],
            vec![comment("b", "v1", 1), comment("a", "v1", 1), comment("z", "v2", 3)],
        )
        .unwrap();
        assert_eq!(c.videos()[0].id, "v1");
        let ids: Vec<_> = c.comments_of("v1").iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert!(c.comments_of("nope").is_empty());
    }

    #[test]
    fn feature_tensor_validates_shape() {
        assert!(FeatureTensor::new(0, 1, 1, vec![]).is_err());
        assert!(FeatureTensor::new(1, 1, 2, vec![1.0]).is_err());
        assert!(FeatureTensor::new(1, 1, 1, vec![f32::NAN]).is_err());
        let f = FeatureTensor::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(f.patch(1, 0), &[2.0]);
    }
}
