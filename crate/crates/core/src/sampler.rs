//! Flow-magnitude-guided dynamic frame sampling (FMG-DFS).
//!
//! Transitions are scored by flow magnitude, the score series is smoothed,
//! the strongest well-separated peaks become short clips, and the clips are
//! merged, trimmed or extended until exactly `M` frames are selected.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frameio::FrameSequence;
use crate::optflow::{
    flow_from_pyramids, flow_mean_magnitude, flow_p95_magnitude, FlowField, FlowParams, FramePyramid,
};

/// How a flow field is reduced to one instability score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreStat {
    #[default]
    Mean,
    Max,
    P95,
}

impl ScoreStat {
    pub fn reduce(self, flow: &FlowField) -> f64 {
        match self {
            ScoreStat::Mean => flow_mean_magnitude(flow),
            ScoreStat::Max => flow.max_magnitude(),
            ScoreStat::P95 => flow_p95_magnitude(flow),
        }
    }
}

impl FromStr for ScoreStat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ScoreStat::Mean),
            "max" => Ok(ScoreStat::Max),
            "p95" => Ok(ScoreStat::P95),
            other => Err(Error::InvalidParam(format!("unknown score statistic \"{other}\""))),
        }
    }
}

/// Per-transition motion scores: `scores[t]` measures `f_t -> f_{t+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstabilityProfile {
    pub scores: Vec<f64>,
    pub n: usize,
    pub params_digest: String,
}

impl InstabilityProfile {
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if let Some(s) = scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(Error::InvalidParam(format!("instability score {s} must be finite and >= 0")));
        }
        Ok(InstabilityProfile {
            n: scores.len() + 1,
            scores,
            params_digest: "external".into(),
        })
    }

    pub fn mean_score(&self) -> f64 {
        if self.scores.is_empty() {
            0.0
        } else {
            self.scores.iter().sum::<f64>() / self.scores.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerParams {
    /// Number of peaks (segments).
    pub k: usize,
    /// Minimum distance between accepted peaks, in transitions.
    pub w: usize,
    /// Total number of frames to sample.
    pub m: usize,
    /// Smoothing window length.
    pub ws: usize,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams {
            k: 3,
            w: 5,
            m: 10,
            ws: 3,
        }
    }
}

impl SamplerParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("k", self.k), ("w", self.w), ("m", self.m), ("ws", self.ws)] {
            if v == 0 {
                return Err(Error::InvalidParam(format!("sampler parameter {name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Half-open frame interval built around a peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub start: usize,
    pub end: usize,
    pub peak: usize,
    pub peak_score: f64,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Clip,
    GapFill,
    FallbackUniform,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledIndices {
    pub indices: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

impl SampledIndices {
    fn from_tagged(mut tagged: Vec<(usize, Provenance)>) -> Self {
        tagged.sort_by_key(|&(i, _)| i);
        tagged.dedup_by_key(|&mut (i, _)| i);
        let (indices, provenance) = tagged.into_iter().unzip();
        SampledIndices {
            indices,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Everything FMG-DFS computed on the way to its indices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingTrace {
    pub scores_smooth: Vec<f64>,
    /// Accepted peaks, as transition indices.
    pub peaks: Vec<usize>,
    /// Top-K peaks, as transition indices.
    pub top_peaks: Vec<usize>,
    /// Clips before finalization.
    pub clips: Vec<Clip>,
    /// Clips after merging and trimming.
    pub final_clips: Vec<Clip>,
    pub sampled: SampledIndices,
}

/// Scores every transition with the mean flow magnitude.
pub fn instability_profile(seq: &FrameSequence, fp: &FlowParams) -> Result<InstabilityProfile> {
    instability_profile_with(seq, fp, ScoreStat::Mean)
}

pub fn instability_profile_with(
    seq: &FrameSequence,
    fp: &FlowParams,
    stat: ScoreStat,
) -> Result<InstabilityProfile> {
    let n = seq.len();
    if n < 2 {
        return Err(Error::SequenceTooShort(n));
    }
    fp.validate()?;
    let pyramids: Vec<FramePyramid> = seq
        .frames()
        .par_iter()
        .map(|f| FramePyramid::build(f, fp))
        .collect();
    let scores = pyramids
        .par_windows(2)
        .map(|pair| flow_from_pyramids(&pair[0], &pair[1], fp).map(|f| stat.reduce(&f)))
        .collect::<Result<Vec<f64>>>()?;
    let digest = match stat {
        ScoreStat::Mean => fp.digest(),
        other => format!("{};stat={}", fp.digest(), serde_json::to_value(other).unwrap().as_str().unwrap()),
    };
    Ok(InstabilityProfile {
        scores,
        n,
        params_digest: digest,
    })
}

/// Centered moving average; windows are truncated at the ends and averaged
/// over the samples they actually cover.
pub fn smooth(scores: &[f64], ws: usize) -> Vec<f64> {
    let ws = ws.max(1);
    if ws == 1 {
        return scores.to_vec();
    }
    let left = (ws - 1) / 2;
    let right = ws / 2;
    let n = scores.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(left);
            let hi = (i + right).min(n - 1);
            let window = &scores[lo..=hi];
            window.iter().sum::<f64>() / window.len() as f64
        })
        .collect()
}

/// Descending score, ties broken by lower index.
fn by_score_desc(scores: &[f64]) -> impl Fn(&usize, &usize) -> std::cmp::Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Strict interior local maxima, accepted greedily by descending score while
/// keeping accepted peaks at least `w` apart. Returned in ascending order.
pub fn find_peaks(scores: &[f64], w: usize) -> Vec<usize> {
    let n = scores.len();
    if n < 3 {
        return Vec::new();
    }
    let mut candidates: Vec<usize> = (1..n - 1)
        .filter(|&i| scores[i] > scores[i - 1] && scores[i] > scores[i + 1])
        .collect();
    candidates.sort_by(by_score_desc(scores));
    let mut accepted: Vec<usize> = Vec::new();
    for c in candidates {
        if accepted.iter().all(|&p| p.abs_diff(c) >= w) {
            accepted.push(c);
        }
    }
    accepted.sort_unstable();
    accepted
}

/// The `k` highest-scoring peaks, in ascending index order.
pub fn top_k_peaks(peaks: &[usize], scores: &[f64], k: usize) -> Vec<usize> {
    let mut ranked = peaks.to_vec();
    ranked.sort_by(by_score_desc(scores));
    ranked.truncate(k);
    ranked.sort_unstable();
    ranked
}

/// Frame that a transition moves into.
#[inline]
pub fn transition_to_frame(t: usize) -> usize {
    t + 1
}

/// Score attached to a frame: the transition entering it (frame 0 borrows
/// the first transition's score).
#[inline]
fn frame_score(scores_smooth: &[f64], j: usize) -> f64 {
    match scores_smooth.len() {
        0 => 0.0,
        len => scores_smooth[j.saturating_sub(1).min(len - 1)],
    }
}

/// Clips of `⌊m/k⌋` frames (at least one) around each peak frame.
/// `peak_frames` are frame indices; `scores_smooth` is indexed by transition.
pub fn build_clips(peak_frames: &[usize], n: usize, m: usize, k: usize, scores_smooth: &[f64]) -> Vec<Clip> {
    let per_clip = (m / k.max(1)).max(1);
    let half = per_clip / 2;
    peak_frames
        .iter()
        .map(|&p| {
            let start = p.saturating_sub(half).min(n.saturating_sub(1));
            let end = n.min(start + per_clip);
            Clip {
                start,
                end,
                peak: p,
                peak_score: frame_score(scores_smooth, p),
            }
        })
        .collect()
}

/// Sorts clips and merges any that overlap or touch.
pub fn remove_overlap(clips: &[Clip]) -> Vec<Clip> {
    let mut sorted: Vec<Clip> = clips.iter().copied().filter(|c| !c.is_empty()).collect();
    sorted.sort_by(|a, b| a.start.cmp(&b.start).then(a.end.cmp(&b.end)));
    let mut merged: Vec<Clip> = Vec::with_capacity(sorted.len());
    for c in sorted {
        match merged.last_mut() {
            Some(last) if c.start <= last.end => {
                last.end = last.end.max(c.end);
                if c.peak_score > last.peak_score {
                    last.peak = c.peak;
                    last.peak_score = c.peak_score;
                }
            }
            _ => merged.push(c),
        }
    }
    merged
}

/// Trims single frames from clip ends until at most `m` frames are covered.
/// The trimmed frame is always the lowest-scoring clip tail; ties go to the
/// longest clip, then the lowest start.
pub fn adjust_clips(clips: &[Clip], m: usize, scores_smooth: &[f64]) -> Vec<Clip> {
    let mut clips = clips.to_vec();
    let mut total: usize = clips.iter().map(Clip::len).sum();
    while total > m {
        let victim = (0..clips.len())
            .min_by(|&a, &b| {
                let (ca, cb) = (&clips[a], &clips[b]);
                frame_score(scores_smooth, ca.end - 1)
                    .total_cmp(&frame_score(scores_smooth, cb.end - 1))
                    .then(cb.len().cmp(&ca.len()))
                    .then(ca.start.cmp(&cb.start))
            })
            .expect("total > m >= 0 implies a clip exists");
        clips[victim].end -= 1;
        if clips[victim].is_empty() {
            clips.remove(victim);
        }
        total -= 1;
    }
    clips
}

/// Adds the best-scoring uncovered frames (ties to the lowest index) until
/// `m` frames are selected or every frame is covered.
pub fn fill_gaps(
    selected: &mut Vec<(usize, Provenance)>,
    n: usize,
    m: usize,
    scores_smooth: &[f64],
    tag: Provenance,
) {
    if selected.len() >= m.min(n) {
        return;
    }
    let covered: BTreeSet<usize> = selected.iter().map(|&(i, _)| i).collect();
    let mut free: Vec<usize> = (0..n).filter(|j| !covered.contains(j)).collect();
    free.sort_by(|&a, &b| {
        frame_score(scores_smooth, b)
            .total_cmp(&frame_score(scores_smooth, a))
            .then(a.cmp(&b))
    });
    let need = m.min(n) - selected.len();
    selected.extend(free.into_iter().take(need).map(|j| (j, tag)));
}

/// Merges, trims to `m`, and gap-fills the clips into exactly `min(m, n)`
/// sorted indices.
pub fn finalize_clips(clips: &[Clip], n: usize, m: usize, scores_smooth: &[f64]) -> (Vec<Clip>, SampledIndices) {
    let merged = remove_overlap(clips);
    let trimmed = adjust_clips(&merged, m, scores_smooth);
    let mut tagged: Vec<(usize, Provenance)> = trimmed
        .iter()
        .flat_map(|c| (c.start..c.end).map(|j| (j, Provenance::Clip)))
        .collect();
    fill_gaps(&mut tagged, n, m, scores_smooth, Provenance::GapFill);
    (trimmed, SampledIndices::from_tagged(tagged))
}

/// Evenly spaced indices `round(i·(n−1)/(m−1))`; a single sample takes the
/// middle frame.
pub fn uniform_indices(n: usize, m: usize, scores_smooth: &[f64]) -> SampledIndices {
    if n == 0 || m == 0 {
        return SampledIndices::from_tagged(Vec::new());
    }
    if n <= m {
        return SampledIndices::from_tagged((0..n).map(|i| (i, Provenance::FallbackUniform)).collect());
    }
    let mut tagged: Vec<(usize, Provenance)> = if m == 1 {
        vec![((n - 1) / 2, Provenance::FallbackUniform)]
    } else {
        (0..m)
            .map(|i| {
                let pos = (i as f64 * (n - 1) as f64 / (m - 1) as f64).round() as usize;
                (pos, Provenance::FallbackUniform)
            })
            .collect()
    };
    tagged.sort_by_key(|&(i, _)| i);
    tagged.dedup_by_key(|&mut (i, _)| i);
    fill_gaps(&mut tagged, n, m, scores_smooth, Provenance::FallbackUniform);
    SampledIndices::from_tagged(tagged)
}

/// `min(m, n)` distinct indices drawn uniformly at random from a seeded stream.
pub fn random_indices(n: usize, m: usize, seed: u64) -> SampledIndices {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, n, m.min(n));
    SampledIndices::from_tagged(picked.into_iter().map(|i| (i, Provenance::Random)).collect())
}

/// FMG-DFS over a precomputed instability profile.
pub fn fmg_dfs_from_profile(profile: &InstabilityProfile, sp: &SamplerParams) -> Result<SamplingTrace> {
    sp.validate()?;
    let n = profile.n;
    if profile.scores.len() + 1 != n && n != 0 {
        return Err(Error::InvalidParam(format!(
            "profile has {} scores for {n} frames",
            profile.scores.len()
        )));
    }
    let scores_smooth = if profile.scores.is_empty() {
        Vec::new()
    } else {
        smooth(&profile.scores, sp.ws)
    };
    let mut trace = SamplingTrace {
        scores_smooth,
        peaks: Vec::new(),
        top_peaks: Vec::new(),
        clips: Vec::new(),
        final_clips: Vec::new(),
        sampled: SampledIndices::from_tagged(Vec::new()),
    };
    if n <= sp.m {
        trace.sampled = uniform_indices(n, sp.m, &trace.scores_smooth);
        return Ok(trace);
    }
    trace.peaks = find_peaks(&trace.scores_smooth, sp.w);
    if trace.peaks.is_empty() {
        trace.sampled = uniform_indices(n, sp.m, &trace.scores_smooth);
        return Ok(trace);
    }
    trace.top_peaks = top_k_peaks(&trace.peaks, &trace.scores_smooth, sp.k);
    let peak_frames: Vec<usize> = trace.top_peaks.iter().map(|&t| transition_to_frame(t)).collect();
    trace.clips = build_clips(&peak_frames, n, sp.m, sp.k, &trace.scores_smooth);
    let (final_clips, sampled) = finalize_clips(&trace.clips, n, sp.m, &trace.scores_smooth);
    trace.final_clips = final_clips;
    trace.sampled = sampled;
    Ok(trace)
}

/// End-to-end FMG-DFS on a frame sequence. Frames are used as given; callers
/// downscale to the working resolution first.
pub fn fmg_dfs(
    seq: &FrameSequence,
    sp: &SamplerParams,
    fp: &FlowParams,
    stat: ScoreStat,
) -> Result<(InstabilityProfile, SamplingTrace)> {
    sp.validate()?;
    let n = seq.len();
    let profile = if n < 2 {
        InstabilityProfile {
            scores: Vec::new(),
            n,
            params_digest: fp.digest(),
        }
    } else {
        instability_profile_with(seq, fp, stat)?
    };
    let trace = fmg_dfs_from_profile(&profile, sp)?;
    Ok((profile, trace))
}

/// Frame selection strategy for audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Fmg,
    Mean,
    Random,
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fmg" => Ok(SamplingMode::Fmg),
            "mean" | "uniform" => Ok(SamplingMode::Mean),
            "random" => Ok(SamplingMode::Random),
            other => Err(Error::InvalidParam(format!("unknown sampling mode \"{other}\""))),
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::Fmg => "fmg",
            SamplingMode::Mean => "mean",
            SamplingMode::Random => "random",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn approx(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn smooth_examples() {
        let s = smooth(&[0.0, 0.0, 10.0, 0.0, 0.0], 3);
        assert!(approx(&s, &[0.0, 10.0 / 3.0, 10.0 / 3.0, 10.0 / 3.0, 0.0]), "{s:?}");
        let x = [1.0, 5.0, 2.0];
        assert_eq!(smooth(&x, 1), x.to_vec());
        assert!(smooth(&[2.5; 7], 5).iter().all(|&v| (v - 2.5).abs() < 1e-12));
        // Boundary renormalization.
        assert!(approx(&smooth(&[3.0, 1.0], 3), &[2.0, 2.0]));
    }

    #[test]
    fn find_peaks_examples() {
        let s = [1.0, 3.0, 2.0, 5.0, 4.0];
        assert_eq!(find_peaks(&s, 1), vec![1, 3]);
        assert_eq!(find_peaks(&s, 3), vec![3]);
        assert!(find_peaks(&[1.0, 2.0, 3.0, 4.0], 1).is_empty());
        assert!(find_peaks(&[2.0, 2.0, 2.0], 1).is_empty());
    }

    #[test]
    fn top_k_examples() {
        let s = [1.0, 3.0, 2.0, 5.0, 4.0];
        assert_eq!(top_k_peaks(&[1, 3], &s, 1), vec![3]);
        assert_eq!(top_k_peaks(&[1, 3], &s, 5), vec![1, 3]);
        let mut t = vec![0.0; 12];
        t[4] = 1.0;
        t[9] = 1.0;
        assert_eq!(top_k_peaks(&[4, 9], &t, 1), vec![4]);
    }

    #[test]
    fn build_clips_arithmetic() {
        let s = vec![0.0; 49];
        let c = build_clips(&[20], 50, 10, 3, &s);
        assert_eq!((c[0].start, c[0].end), (19, 22));
        let c = build_clips(&[0], 50, 10, 3, &s);
        assert_eq!((c[0].start, c[0].end), (0, 3));
        let c = build_clips(&[49], 50, 10, 3, &s);
        assert_eq!((c[0].start, c[0].end), (48, 50));
        // M < K still yields one-frame clips.
        let c = build_clips(&[7], 50, 2, 3, &s);
        assert_eq!((c[0].start, c[0].end), (7, 8));
    }

    fn clip(start: usize, end: usize) -> Clip {
        Clip {
            start,
            end,
            peak: start,
            peak_score: 0.0,
        }
    }

    #[test]
    fn overlapping_clips_merge() {
        let merged = remove_overlap(&[clip(11, 14), clip(10, 13)]);
        assert_eq!(merged.len(), 1);
        assert_eq!((merged[0].start, merged[0].end), (10, 14));
        let touching = remove_overlap(&[clip(0, 3), clip(3, 5), clip(7, 8)]);
        assert_eq!(
            touching.iter().map(|c| (c.start, c.end)).collect::<Vec<_>>(),
            vec![(0, 5), (7, 8)]
        );
    }

    #[test]
    fn gap_fill_takes_best_uncovered_frame() {
        let n = 90;
        let mut s = vec![0.0; n - 1];
        // Clip frames carry the top scores; frame 75 (transition 74) is the
        // best uncovered one.
        for t in [18, 19, 20, 39, 40, 41, 59, 60, 61] {
            s[t] = 10.0;
        }
        s[74] = 7.0;
        s[30] = 6.0;
        let clips = [clip(19, 22), clip(40, 43), clip(60, 63)];
        let (_, out) = finalize_clips(&clips, n, 10, &s);
        // Oracle: exhaustive scan for the best uncovered frame.
        let covered: Vec<usize> = (19..22).chain(40..43).chain(60..63).collect();
        let best = (0..n)
            .filter(|j| !covered.contains(j))
            .max_by(|&a, &b| frame_score(&s, a).total_cmp(&frame_score(&s, b)).then(b.cmp(&a)))
            .unwrap();
        assert_eq!(best, 75);
        assert_eq!(out.len(), 10);
        assert!(out.indices.contains(&best));
        let pos = out.indices.iter().position(|&i| i == best).unwrap();
        assert_eq!(out.provenance[pos], Provenance::GapFill);
    }

    #[test]
    fn exact_total_is_identity() {
        let s = vec![1.0; 39];
        let (_, out) = finalize_clips(&[clip(2, 7), clip(20, 25)], 40, 10, &s);
        assert_eq!(out.indices, vec![2, 3, 4, 5, 6, 20, 21, 22, 23, 24]);
        assert!(out.provenance.iter().all(|&p| p == Provenance::Clip));
    }

    #[test]
    fn trimming_removes_lowest_scoring_tail() {
        let mut s = vec![1.0; 29];
        s[3] = 0.5; // frame 4, tail of the first clip
        let (clips, out) = finalize_clips(&[clip(0, 5), clip(10, 15)], 30, 9, &s);
        assert_eq!(out.indices, vec![0, 1, 2, 3, 10, 11, 12, 13, 14]);
        assert_eq!(clips[0].end, 4);
    }

    #[test]
    fn small_sequences_return_everything() {
        let p = InstabilityProfile::from_scores(vec![1.0; 5]).unwrap();
        let t = fmg_dfs_from_profile(&p, &SamplerParams::default()).unwrap();
        assert_eq!(t.sampled.indices, vec![0, 1, 2, 3, 4, 5]);
        assert!(t.sampled.provenance.iter().all(|&p| p == Provenance::FallbackUniform));
        let one = InstabilityProfile::from_scores(vec![]).unwrap();
        assert_eq!(fmg_dfs_from_profile(&one, &SamplerParams::default()).unwrap().sampled.indices, vec![0]);
    }

    #[test]
    fn flat_profile_falls_back_to_uniform() {
        let p = InstabilityProfile::from_scores(vec![0.0; 99]).unwrap();
        let t = fmg_dfs_from_profile(&p, &SamplerParams::default()).unwrap();
        let expected: Vec<usize> = (0..10).map(|i| (i as f64 * 99.0 / 9.0).round() as usize).collect();
        assert_eq!(t.sampled.indices, expected);
    }

    #[test]
    fn random_indices_are_seeded() {
        let a = random_indices(100, 10, 3);
        assert_eq!(a, random_indices(100, 10, 3));
        assert_eq!(a.len(), 10);
        assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(random_indices(4, 10, 3).indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn too_short_sequence_errors() {
        let seq = FrameSequence::new(
            "one",
            vec![crate::frameio::LumaImage::constant(8, 8, 0.5)],
            Vec::new(),
        )
        .unwrap();
        assert!(matches!(
            instability_profile(&seq, &FlowParams::default()),
            Err(Error::SequenceTooShort(1))
        ));
        let (_, t) = fmg_dfs(&seq, &SamplerParams::default(), &FlowParams::default(), ScoreStat::Mean).unwrap();
        assert_eq!(t.sampled.indices, vec![0]);
    }

    proptest! {
        #[test]
        fn smoothing_stays_within_range(s in proptest::collection::vec(0.0f64..100.0, 1..60), ws in 1usize..9) {
            let out = smooth(&s, ws);
            let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(out.len(), s.len());
            prop_assert!(out.iter().all(|&v| v >= lo - 1e-9 && v <= hi + 1e-9));
        }

        #[test]
        fn ranking_stages_are_monotone_invariant(
            s in proptest::collection::vec(0.0f64..50.0, 1..80),
            w in 1usize..10,
            k in 1usize..6,
            m in 1usize..20,
        ) {
            let t: Vec<f64> = s.iter().map(|&v| (v * 0.3).exp() + 2.0 * v).collect();
            let (pa, pb) = (find_peaks(&s, w), find_peaks(&t, w));
            prop_assert_eq!(&pa, &pb);
            prop_assert_eq!(top_k_peaks(&pa, &s, k), top_k_peaks(&pb, &t, k));
            let n = s.len() + 1;
            let frames: Vec<usize> = top_k_peaks(&pa, &s, k).iter().map(|&p| p + 1).collect();
            let clips = build_clips(&frames, n, m, k, &s);
            prop_assert_eq!(finalize_clips(&clips, n, m, &s).1, finalize_clips(&clips, n, m, &t).1);
        }
    }
}
