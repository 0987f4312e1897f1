//! End-to-end audit: sample frames per video, ask one question per artifact
//! category, and optionally score the answers against annotations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frameio::{self, load_sequence, FrameSequence};
use crate::optflow::FlowParams;
use crate::predictor::{BackendSpec, PredictRequest, Predictor};
use crate::qa_eval::{evaluate_records, generate_qa, AnnotationRecord, EvalReport, PredictionRecord};
use crate::sampler::{
    fmg_dfs, instability_profile_with, random_indices, uniform_indices, Provenance, SampledIndices,
    SamplerParams, SamplingMode, ScoreStat,
};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone)]
pub struct AuditConfig {
    pub taxonomy: Taxonomy,
    pub sampler: SamplerParams,
    pub flow: FlowParams,
    pub stat: ScoreStat,
    pub max_dim: usize,
    pub sampling: SamplingMode,
    /// Seed for `SamplingMode::Random`.
    pub seed: u64,
    pub backend: BackendSpec,
    /// One frame directory per video.
    pub videos: Vec<PathBuf>,
    /// Sampled frames are exported under `<scratch_dir>/<video_id>/`.
    pub scratch_dir: PathBuf,
    pub annotations: Option<Vec<AnnotationRecord>>,
    pub jobs: usize,
}

impl AuditConfig {
    pub fn new(taxonomy: Taxonomy, backend: BackendSpec, videos: Vec<PathBuf>, scratch_dir: PathBuf) -> Self {
        AuditConfig {
            taxonomy,
            sampler: SamplerParams::default(),
            flow: FlowParams::default(),
            stat: ScoreStat::Mean,
            max_dim: frameio::DEFAULT_MAX_DIM,
            sampling: SamplingMode::Fmg,
            seed: 0,
            backend,
            videos,
            scratch_dir,
            annotations: None,
            jobs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::InvalidParam("jobs must be >= 1".into()));
        }
        if self.max_dim < 16 {
            return Err(Error::InvalidParam(format!("max_dim {} must be >= 16", self.max_dim)));
        }
        self.sampler.validate()?;
        self.flow.validate()?;
        if self.videos.is_empty() {
            return Err(Error::EmptySource("no videos found".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VideoStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoReport {
    pub video_id: String,
    pub status: VideoStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub n: usize,
    pub indices: Vec<usize>,
    pub provenance: Vec<Provenance>,
    /// Clip boundaries `[start, end)` behind the sampled frames (FMG mode).
    pub clips: Vec<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_instability: Option<f64>,
    pub verdicts: BTreeMap<String, String>,
    pub raw_answers: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub diagnostics: BTreeMap<String, String>,
}

impl VideoReport {
    fn failed(video_id: String, err: &Error) -> Self {
        VideoReport {
            video_id,
            status: VideoStatus::Error,
            error: Some(err.to_string()),
            n: 0,
            indices: Vec::new(),
            provenance: Vec::new(),
            clips: Vec::new(),
            mean_instability: None,
            verdicts: BTreeMap::new(),
            raw_answers: BTreeMap::new(),
            diagnostics: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditMeta {
    pub generated_unix_secs: u64,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub meta: AuditMeta,
    pub sampling: SamplingMode,
    pub sampler: SamplerParams,
    pub flow_digest: String,
    pub taxonomy_version: String,
    pub videos: Vec<VideoReport>,
    pub errors: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_error: Option<String>,
}

impl AuditReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-video JSONL lines (`video_id`, `verdicts`, `indices`, …).
    pub fn to_jsonl(&self) -> String {
        self.videos
            .iter()
            .map(|v| serde_json::to_string(v).expect("video report serializes") + "\n")
            .collect()
    }

    pub fn predictions(&self) -> Vec<PredictionRecord> {
        self.videos
            .iter()
            .filter(|v| v.status == VideoStatus::Ok)
            .flat_map(|v| {
                v.raw_answers
                    .iter()
                    .map(|(c, raw)| PredictionRecord::new(v.video_id.clone(), c.clone(), raw.clone()))
            })
            .collect()
    }
}

/// Video directories under `root`: every subdirectory, in natural order. A
/// root with no subdirectories but with frame files is itself one video.
pub fn discover_videos(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort_by(|a, b| {
        frameio::natural_cmp(
            &a.file_name().unwrap_or_default().to_string_lossy(),
            &b.file_name().unwrap_or_default().to_string_lossy(),
        )
    });
    if dirs.is_empty() && !frameio::list_frame_files(root)?.is_empty() {
        dirs.push(root.to_path_buf());
    }
    Ok(dirs)
}

fn video_id_of(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Copies (PNG) or converts (other formats) the selected frames to
/// `<dir>/idx_{index:05}.png`.
pub fn export_frames(seq: &FrameSequence, indices: &[usize], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let dst = dir.join(format!("idx_{i:05}.png"));
        match seq.frame_paths().get(i) {
            Some(src) if src.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) => {
                std::fs::copy(src, &dst).map_err(|e| Error::io(src, e))?;
            }
            Some(src) => {
                let img = image::open(src).map_err(|source| Error::Image {
                    path: src.clone(),
                    source,
                })?;
                img.save(&dst).map_err(|source| Error::Image {
                    path: dst.clone(),
                    source,
                })?;
            }
            None => seq.frames()[i].save_png16(&dst)?,
        }
        out.push(dst);
    }
    Ok(out)
}

struct Sampling {
    sampled: SampledIndices,
    clips: Vec<(usize, usize)>,
    mean_instability: Option<f64>,
}

fn sample_video(seq: &FrameSequence, cfg: &AuditConfig) -> Result<Sampling> {
    let n = seq.len();
    let needs_profile =
        cfg.sampling == SamplingMode::Fmg || matches!(cfg.backend, BackendSpec::Threshold(_));
    let working = if needs_profile { Some(seq.downscaled(cfg.max_dim)) } else { None };
    match cfg.sampling {
        SamplingMode::Fmg => {
            let working = working.expect("profile needed in fmg mode");
            let (profile, trace) = fmg_dfs(&working, &cfg.sampler, &cfg.flow, cfg.stat)?;
            Ok(Sampling {
                sampled: trace.sampled,
                clips: trace.final_clips.iter().map(|c| (c.start, c.end)).collect(),
                mean_instability: (n >= 2).then(|| profile.mean_score()),
            })
        }
        mode => {
            let mean_instability = match working {
                Some(w) if n >= 2 => Some(instability_profile_with(&w, &cfg.flow, cfg.stat)?.mean_score()),
                _ => None,
            };
            let sampled = if mode == SamplingMode::Random {
                random_indices(n, cfg.sampler.m, cfg.seed)
            } else {
                uniform_indices(n, cfg.sampler.m, &[])
            };
            Ok(Sampling {
                sampled,
                clips: Vec::new(),
                mean_instability,
            })
        }
    }
}

fn audit_video(path: &Path, cfg: &AuditConfig, predictor: &mut dyn Predictor) -> VideoReport {
    let video_id = video_id_of(path);
    match audit_video_inner(&video_id, path, cfg, predictor) {
        Ok(r) => r,
        Err(e) => {
            log::error!("video {video_id}: {e}");
            VideoReport::failed(video_id, &e)
        }
    }
}

fn audit_video_inner(
    video_id: &str,
    path: &Path,
    cfg: &AuditConfig,
    predictor: &mut dyn Predictor,
) -> Result<VideoReport> {
    let seq = load_sequence(path)?;
    let sampling = sample_video(&seq, cfg)?;
    let frame_paths = export_frames(&seq, &sampling.sampled.indices, &cfg.scratch_dir.join(video_id))?;

    let mut verdicts = BTreeMap::new();
    let mut raw_answers = BTreeMap::new();
    let mut diagnostics = BTreeMap::new();
    for qa in generate_qa(video_id, &cfg.taxonomy) {
        let req = PredictRequest {
            video_id: video_id.to_string(),
            category_id: qa.category_id.clone(),
            question: qa.question,
            frame_paths: frame_paths.clone(),
            mean_instability: sampling.mean_instability,
        };
        let resp = predictor.predict(&req);
        let rec = PredictionRecord::new(video_id, &qa.category_id, resp.raw_answer);
        verdicts.insert(qa.category_id.clone(), rec.parsed.as_str().to_string());
        raw_answers.insert(qa.category_id.clone(), rec.raw_answer);
        if let Some(d) = resp.diagnostic {
            diagnostics.insert(qa.category_id, d);
        }
    }
    Ok(VideoReport {
        video_id: video_id.to_string(),
        status: VideoStatus::Ok,
        error: None,
        n: seq.len(),
        indices: sampling.sampled.indices,
        provenance: sampling.sampled.provenance,
        clips: sampling.clips,
        mean_instability: sampling.mean_instability,
        verdicts,
        raw_answers,
        diagnostics,
    })
}

/// Runs the audit over all configured videos with `cfg.jobs` workers, each
/// owning a private predictor. Reports are merged in video_id order.
pub fn audit(cfg: &AuditConfig) -> Result<AuditReport> {
    cfg.validate()?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<VideoReport>> = Mutex::new(Vec::with_capacity(cfg.videos.len()));
    let workers = cfg.jobs.min(cfg.videos.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let mut predictor = cfg.backend.instantiate();
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(path) = cfg.videos.get(i) else { break };
                    let report = audit_video(path, cfg, predictor.as_mut());
                    results.lock().expect("result collector").push(report);
                }
            });
        }
    });
    let mut videos = results.into_inner().expect("result collector");
    videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let errors = videos.iter().filter(|v| v.status == VideoStatus::Error).count();

    let mut report = AuditReport {
        meta: AuditMeta {
            generated_unix_secs: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        sampling: cfg.sampling,
        sampler: cfg.sampler,
        flow_digest: cfg.flow.digest(),
        taxonomy_version: cfg.taxonomy.version.clone(),
        videos,
        errors,
        eval: None,
        eval_error: None,
    };
    if let Some(anns) = &cfg.annotations {
        match evaluate_records(&report.predictions(), anns, &cfg.taxonomy) {
            Ok(e) => report.eval = Some(e),
            Err(e) => report.eval_error = Some(e.to_string()),
        }
    }
    Ok(report)
}
