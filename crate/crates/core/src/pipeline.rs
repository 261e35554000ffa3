//! The guard loop: sample, scan, and when a filter fires steer the initial
//! latent away from the matched content and sample again.
//!
//! Attempt 0 goes through exactly the same code path as [`baseline_image`],
//! so a request that never triggers returns the unguarded output bit for bit.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    ddim_invert, generate_image_with, Denoiser, DiffusionError, NoiseSchedule, SampleOptions,
};
use crate::filters::{ContentFilter, FilterError, FilterVerdict};
use crate::numerics::{gaussian, NumericsError, RngState, Tensor};
use crate::steering::{refine_latent, AnchorSets, SteeringConfig, SteeringError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("no content filters configured")]
    NoFilters,
    #[error("anchor strategy yields no anchors")]
    NoAnchors,
    #[error("invalid anchor strategy: {0}")]
    Strategy(String),
    #[error("filter {filter} matched unknown reference {id}")]
    UnknownReference { filter: String, id: String },
    #[error("audit log line {line}: {reason}")]
    Audit { line: usize, reason: String },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Steering(#[from] SteeringError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRequest {
    pub condition: usize,
    pub seed: u64,
    pub substeps: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "latents")]
pub enum DesiredSource {
    #[default]
    None,
    Latents(Vec<Tensor>),
}

/// Where the push and pull anchors come from once a filter fires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorStrategy {
    #[serde(default = "yes")]
    pub include_trigger_latent: bool,
    #[serde(default = "yes")]
    pub invert_matched_refs: bool,
    #[serde(default)]
    pub desired_source: DesiredSource,
    /// Multiplier applied to β on every retry after the first.
    #[serde(default = "default_escalation")]
    pub escalation: f32,
}

fn yes() -> bool {
    true
}

fn default_escalation() -> f32 {
    2.0
}

impl Default for AnchorStrategy {
    fn default() -> Self {
        Self {
            include_trigger_latent: true,
            invert_matched_refs: true,
            desired_source: DesiredSource::None,
            escalation: default_escalation(),
        }
    }
}

impl AnchorStrategy {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !self.include_trigger_latent && !self.invert_matched_refs {
            return Err(PipelineError::Strategy("no undesired anchor source enabled".into()));
        }
        if !(self.escalation.is_finite() && self.escalation >= 1.0) {
            return Err(PipelineError::Strategy(format!(
                "escalation must be >= 1, got {}",
                self.escalation
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuardConfig {
    #[serde(default)]
    pub strategy: AnchorStrategy,
    #[serde(default)]
    pub steering: SteeringConfig,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
}

fn default_retries() -> usize {
    3
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self {
            strategy: AnchorStrategy::default(),
            steering: SteeringConfig::default(),
            max_retries: default_retries(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationStatus {
    CleanUnmodified,
    CleanSteered,
    FailedAfterBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attempt {
    pub latent: Tensor,
    pub image: Tensor,
    pub verdicts: Vec<FilterVerdict>,
    /// Configuration used to produce `latent`; `None` on the first attempt.
    pub steering: Option<SteeringConfig>,
    /// ‖latent − previous latent‖; zero on the first attempt.
    pub displacement: f32,
    /// Refinement left the latent unchanged.
    pub stationary: bool,
}

impl Attempt {
    pub fn triggered(&self) -> bool {
        self.verdicts.iter().any(|v| v.triggered)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRecord {
    pub request: GenerationRequest,
    pub attempts: Vec<Attempt>,
    pub status: GenerationStatus,
}

impl GenerationRecord {
    pub fn final_attempt(&self) -> &Attempt {
        self.attempts.last().expect("a record always holds at least one attempt")
    }

    pub fn final_image(&self) -> &Tensor {
        &self.final_attempt().image
    }

    pub fn accepted(&self) -> bool {
        self.status != GenerationStatus::FailedAfterBudget
    }
}

/// A trained model together with the image geometry it samples.
#[derive(Debug, Clone, Copy)]
pub struct Sampler<'a> {
    pub model: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub height: usize,
    pub width: usize,
    pub options: SampleOptions,
}

impl<'a> Sampler<'a> {
    pub fn new(
        model: &'a Denoiser,
        schedule: &'a NoiseSchedule,
        height: usize,
        width: usize,
        options: SampleOptions,
    ) -> Result<Self, PipelineError> {
        if height * width != model.config().image_len {
            return Err(DiffusionError::Shape(format!(
                "{height}x{width} image does not match model length {}",
                model.config().image_len
            ))
            .into());
        }
        Ok(Self { model, schedule, height, width, options })
    }

    /// The initial latent for a seed.
    pub fn latent(&self, seed: u64) -> Result<Tensor, PipelineError> {
        Ok(gaussian(&mut RngState::new(seed), &[self.height, self.width])?)
    }

    pub fn sample(&self, latent: &Tensor, cond: usize, substeps: usize) -> Result<Tensor, PipelineError> {
        Ok(generate_image_with(latent, cond, self.model, self.schedule, substeps, self.options)?)
    }

    pub fn invert(&self, image: &Tensor, cond: usize, substeps: usize) -> Result<Tensor, PipelineError> {
        Ok(ddim_invert(image, cond, self.model, self.schedule, substeps)?)
    }
}

/// The unguarded output for a request.
pub fn baseline_image(req: &GenerationRequest, sampler: &Sampler) -> Result<Tensor, PipelineError> {
    sampler.model.check_cond(req.condition)?;
    sampler.sample(&sampler.latent(req.seed)?, req.condition, req.substeps)
}

fn scan_all(image: &Tensor, filters: &[&dyn ContentFilter]) -> Result<Vec<FilterVerdict>, PipelineError> {
    filters.iter().map(|f| Ok(f.scan(image)?)).collect()
}

/// Push anchors from the triggered verdicts, pull anchors from the strategy.
/// Matched references are de-duplicated across filters and inverted with
/// their own condition.
pub fn build_anchors(
    verdicts: &[FilterVerdict],
    trigger_latent: &Tensor,
    strategy: &AnchorStrategy,
    filters: &[&dyn ContentFilter],
    sampler: &Sampler,
    substeps: usize,
) -> Result<AnchorSets, PipelineError> {
    strategy.validate()?;
    let mut undesired = Vec::new();
    if strategy.invert_matched_refs {
        let mut seen = std::collections::BTreeSet::new();
        for v in verdicts.iter().filter(|v| v.triggered) {
            for m in &v.matches {
                if !seen.insert(m.reference.clone()) {
                    continue;
                }
                let record = filters
                    .iter()
                    .filter(|f| f.name() == v.filter)
                    .find_map(|f| f.reference(&m.reference))
                    .ok_or_else(|| PipelineError::UnknownReference {
                        filter: v.filter.clone(),
                        id: m.reference.clone(),
                    })?;
                undesired.push(sampler.invert(&record.pixels, record.condition, substeps)?);
            }
        }
    }
    if strategy.include_trigger_latent {
        undesired.push(trigger_latent.clone());
    }
    let desired = match &strategy.desired_source {
        DesiredSource::None => Vec::new(),
        DesiredSource::Latents(v) => v.clone(),
    };
    let anchors = AnchorSets::new(desired, undesired);
    if anchors.is_empty() {
        return Err(PipelineError::NoAnchors);
    }
    Ok(anchors)
}

pub fn generate_guarded(
    req: &GenerationRequest,
    sampler: &Sampler,
    filters: &[&dyn ContentFilter],
    cfg: &GuardConfig,
) -> Result<GenerationRecord, PipelineError> {
    if filters.is_empty() {
        return Err(PipelineError::NoFilters);
    }
    cfg.strategy.validate()?;
    cfg.steering.validate()?;
    sampler.model.check_cond(req.condition)?;

    let latent = sampler.latent(req.seed)?;
    let image = sampler.sample(&latent, req.condition, req.substeps)?;
    let verdicts = scan_all(&image, filters)?;
    let mut attempts = vec![Attempt {
        latent,
        image,
        verdicts,
        steering: None,
        displacement: 0.0,
        stationary: false,
    }];
    if !attempts[0].triggered() {
        return Ok(GenerationRecord {
            request: *req,
            attempts,
            status: GenerationStatus::CleanUnmodified,
        });
    }

    let mut steer = cfg.steering.clone();
    for _ in 0..cfg.max_retries {
        let prev = attempts.last().expect("non-empty");
        let anchors = build_anchors(
            &prev.verdicts,
            &prev.latent,
            &cfg.strategy,
            filters,
            sampler,
            req.substeps,
        )?;
        let refined = refine_latent(&prev.latent, &anchors, &steer)?;
        let image = sampler.sample(&refined.latent, req.condition, req.substeps)?;
        let verdicts = scan_all(&image, filters)?;
        attempts.push(Attempt {
            latent: refined.latent,
            image,
            verdicts,
            steering: Some(steer.clone()),
            displacement: refined.displacement,
            stationary: refined.stationary,
        });
        if !attempts.last().expect("non-empty").triggered() {
            return Ok(GenerationRecord {
                request: *req,
                attempts,
                status: GenerationStatus::CleanSteered,
            });
        }
        steer.beta *= cfg.strategy.escalation;
    }
    Ok(GenerationRecord {
        request: *req,
        attempts,
        status: GenerationStatus::FailedAfterBudget,
    })
}

/// Writes one JSON object per line.
pub fn write_audit<W: Write>(out: &mut W, records: &[GenerationRecord]) -> Result<(), PipelineError> {
    for r in records {
        serde_json::to_writer(&mut *out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_audit<R: BufRead>(input: R) -> Result<Vec<GenerationRecord>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| PipelineError::Audit {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{DenoiserConfig, ScheduleParams};
    use crate::filters::Match;

    struct Always {
        trigger: bool,
    }

    impl ContentFilter for Always {
        fn name(&self) -> &str {
            "always"
        }

        fn scan(&self, _image: &Tensor) -> Result<FilterVerdict, FilterError> {
            Ok(FilterVerdict {
                filter: "always".into(),
                triggered: self.trigger,
                score: 0.0,
                threshold: 0.1,
                matches: Vec::new(),
            })
        }
    }

    fn toy() -> (Denoiser, NoiseSchedule) {
        let cfg = DenoiserConfig {
            image_len: 16,
            hidden: 8,
            layers: 3,
            time_dim: 4,
            cond_dim: 2,
            cond_count: 2,
            skip: true,
        };
        (
            Denoiser::new(cfg, &mut RngState::new(3)).unwrap(),
            NoiseSchedule::linear(ScheduleParams::default()).unwrap(),
        )
    }

    fn req() -> GenerationRequest {
        GenerationRequest { condition: 1, seed: 7, substeps: 10 }
    }

    #[test]
    fn clean_first_attempt_is_the_baseline() {
        let (m, s) = toy();
        let sampler = Sampler::new(&m, &s, 4, 4, SampleOptions::default()).unwrap();
        let f = Always { trigger: false };
        let rec = generate_guarded(&req(), &sampler, &[&f], &GuardConfig::default()).unwrap();
        assert_eq!(rec.status, GenerationStatus::CleanUnmodified);
        assert_eq!(rec.attempts.len(), 1);
        assert!(rec.attempts[0].steering.is_none());
        let base = baseline_image(&req(), &sampler).unwrap();
        assert_eq!(rec.final_image().to_lstn_bytes(), base.to_lstn_bytes());
    }

    #[test]
    fn zero_retries_fail_after_one_attempt() {
        let (m, s) = toy();
        let sampler = Sampler::new(&m, &s, 4, 4, SampleOptions::default()).unwrap();
        let f = Always { trigger: true };
        let cfg = GuardConfig { max_retries: 0, ..GuardConfig::default() };
        let rec = generate_guarded(&req(), &sampler, &[&f], &cfg).unwrap();
        assert_eq!(rec.status, GenerationStatus::FailedAfterBudget);
        assert_eq!(rec.attempts.len(), 1);
        assert!(!rec.accepted());
    }

    #[test]
    fn retries_escalate_beta_and_respect_the_budget() {
        let (m, s) = toy();
        let sampler = Sampler::new(&m, &s, 4, 4, SampleOptions::default()).unwrap();
        let f = Always { trigger: true };
        let cfg = GuardConfig { max_retries: 3, ..GuardConfig::default() };
        let rec = generate_guarded(&req(), &sampler, &[&f], &cfg).unwrap();
        assert_eq!(rec.attempts.len(), 4);
        let betas: Vec<f32> = rec.attempts[1..].iter().map(|a| a.steering.as_ref().unwrap().beta).collect();
        assert_eq!(betas, vec![1.0, 2.0, 4.0]);
        // Only the trigger latent is available, which is its own stationary
        // point under cosine repulsion.
        for a in &rec.attempts[1..] {
            assert!((a.displacement > 0.0) != a.stationary);
        }
    }

    #[test]
    fn no_filters_is_an_error() {
        let (m, s) = toy();
        let sampler = Sampler::new(&m, &s, 4, 4, SampleOptions::default()).unwrap();
        assert!(matches!(
            generate_guarded(&req(), &sampler, &[], &GuardConfig::default()),
            Err(PipelineError::NoFilters)
        ));
    }

    #[test]
    fn unknown_condition_is_rejected() {
        let (m, s) = toy();
        let sampler = Sampler::new(&m, &s, 4, 4, SampleOptions::default()).unwrap();
        let f = Always { trigger: false };
        let bad = GenerationRequest { condition: 9, ..req() };
        assert!(generate_guarded(&bad, &sampler, &[&f], &GuardConfig::default()).is_err());
    }

    #[test]
    fn strategy_validation() {
        let s = AnchorStrategy {
            include_trigger_latent: false,
            invert_matched_refs: false,
            ..AnchorStrategy::default()
        };
        assert!(s.validate().is_err());
        let s = AnchorStrategy { escalation: 0.5, ..AnchorStrategy::default() };
        assert!(s.validate().is_err());
    }

    #[test]
    fn unknown_reference_is_reported() {
        let (m, s) = toy();
        let sampler = Sampler::new(&m, &s, 4, 4, SampleOptions::default()).unwrap();
        let f = Always { trigger: true };
        let v = FilterVerdict {
            filter: "always".into(),
            triggered: true,
            score: 0.0,
            threshold: 0.1,
            matches: vec![Match { reference: "nope".into(), distance: 0.0 }],
        };
        let z = sampler.latent(1).unwrap();
        let err = build_anchors(&[v], &z, &AnchorStrategy::default(), &[&f], &sampler, 10);
        assert!(matches!(err, Err(PipelineError::UnknownReference { .. })));
    }

    #[test]
    fn audit_round_trips() {
        let (m, s) = toy();
        let sampler = Sampler::new(&m, &s, 4, 4, SampleOptions::default()).unwrap();
        let f = Always { trigger: true };
        let cfg = GuardConfig { max_retries: 1, ..GuardConfig::default() };
        let rec = generate_guarded(&req(), &sampler, &[&f], &cfg).unwrap();
        let mut buf = Vec::new();
        write_audit(&mut buf, &[rec.clone(), rec.clone()]).unwrap();
        let back = read_audit(buf.as_slice()).unwrap();
        assert_eq!(back, vec![rec.clone(), rec]);
        assert!(matches!(read_audit(&b"{}\n"[..]), Err(PipelineError::Audit { line: 1, .. })));
    }

    #[test]
    fn guard_config_json_defaults() {
        let cfg: GuardConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, GuardConfig::default());
        assert!(serde_json::from_str::<GuardConfig>(r#"{"retries": 2}"#).is_err());
    }
}
