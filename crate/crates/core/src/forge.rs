//! Chain-of-thought dataset synthesis from scripted-expert demonstrations.
//!
//! Frames at gripper transitions are keyframes: they are annotated with a
//! reasoning step, a ZOOM-IN call on the target, the returned evidence, a
//! confirming step and the expert chunk. All other frames get a text-only
//! progress note. Every record is validated for grammar, keyframe/tool
//! consistency and temporal consistency before it is written.

use crate::action::ActionChunk;
use crate::env::expert::{gripper_transitions, scripted_expert, ExpertPlan, Phase};
use crate::env::{EnvConfig, EnvError, EnvState, Observation, Proprio, TaskSpec, TaskSuite, Tier};
use crate::policy::{PolicyConfig, PromptContext, StepTrace};
use crate::trace::{Grammar, ParseErrorKind, Region, Segment, ToolSpec, Trace};
use crate::vision::{execute_tool_call, EvidencePayload, Image, ToolRegistry};
use crate::vocab::TokenId;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Pixels added on every side of the target's coarse patch to form the zoom region.
pub const REGION_DILATION: u32 = 2;
/// Side of a coarse observation patch in pixels.
const PATCH_PX: u32 = 8;

/// Seeds with the top bit set never collide with evaluation seeds `0..N`.
pub fn derived_seed(domain: &str, seed: u64, task: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(task.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest has 8 bytes")) | (1 << 63)
}

/// An expert episode with the frame observed before each chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub task: TaskSpec,
    pub seed: u64,
    /// `frames[i]` is observed before `plan.chunks[i]` executes.
    pub frames: Vec<Observation>,
    pub states: Vec<EnvState>,
    pub plan: ExpertPlan,
}

impl Demonstration {
    pub fn record(env: &EnvConfig, task: &TaskSpec, seed: u64) -> Result<Self, EnvError> {
        let (state, _) = env.reset(task, seed)?;
        let plan = scripted_expert(&state, env.chunk_len)?;
        let mut sim = state;
        let mut frames = Vec::with_capacity(plan.chunks.len());
        let mut states = Vec::with_capacity(plan.chunks.len());
        for chunk in &plan.chunks {
            frames.push(sim.observe());
            states.push(sim.clone());
            sim.step(chunk)?;
        }
        Ok(Demonstration {
            task: task.clone(),
            seed,
            frames,
            states,
            plan,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// One line of the demonstration dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoStepLine {
    pub task: String,
    pub seed: u64,
    pub frame_id: usize,
    pub gripper: (u32, u32),
    pub gripper_closed: bool,
    pub held: Option<usize>,
    pub objects: Vec<(usize, String, (u32, u32))>,
    pub chunk: ActionChunk,
    pub gripper_closed_after: bool,
}

impl Demonstration {
    pub fn dump_lines(&self) -> Vec<DemoStepLine> {
        (0..self.len())
            .map(|i| {
                let s = &self.states[i];
                DemoStepLine {
                    task: self.task.name.clone(),
                    seed: self.seed,
                    frame_id: i,
                    gripper: s.gripper_pos,
                    gripper_closed: s.gripper_closed,
                    held: s.held,
                    objects: s
                        .objects
                        .iter()
                        .map(|o| {
                            (
                                o.id,
                                format!(
                                    "{} {} {}",
                                    o.marking.word(),
                                    o.color.word(),
                                    o.kind.word()
                                ),
                                o.cell,
                            )
                        })
                        .collect(),
                    chunk: self.plan.chunks[i].clone(),
                    gripper_closed_after: self.plan.gripper_closed[i],
                }
            })
            .collect()
    }
}

/// Frames whose chunk toggles the gripper: indices `i > 0` with a state change
/// between the post-chunk gripper states `i - 1` and `i`.
pub fn detect_keyframes(demo: &Demonstration) -> Vec<usize> {
    gripper_transitions(&demo.plan.gripper_closed)
}

/// A supervised decision step.
#[derive(Debug, Clone, PartialEq)]
pub struct CotRecord {
    pub task: String,
    pub demo_seed: u64,
    pub frame_id: usize,
    pub is_keyframe: bool,
    pub prompt: PromptContext,
    pub target: Vec<TokenId>,
    pub tool_region: Option<Region>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnnotateError {
    #[error("frame {0} is not a keyframe")]
    NotKeyframe(usize),
    #[error("frame {0} is a keyframe")]
    IsKeyframe(usize),
    #[error("frame {0} is outside the demonstration")]
    FrameOutOfRange(usize),
    #[error("target of frame {0} lies outside the image")]
    TargetOffscreen(usize),
}

/// Zoom region for an object: its coarse patch grown by the dilation margin.
pub fn target_region(cell: (u32, u32), cell_px: u32, frame: (u32, u32)) -> Region {
    let (px, py) = (cell.0 * cell_px / PATCH_PX, cell.1 * cell_px / PATCH_PX);
    Region::new(
        (px * PATCH_PX).saturating_sub(REGION_DILATION),
        (py * PATCH_PX).saturating_sub(REGION_DILATION),
        ((px + 1) * PATCH_PX + REGION_DILATION).min(frame.0),
        ((py + 1) * PATCH_PX + REGION_DILATION).min(frame.1),
    )
}

/// Builds records for a demonstration; the vocabulary must contain every template word.
pub struct Annotator<'a> {
    pub grammar: &'a Grammar,
    pub policy: &'a PolicyConfig,
}

impl Annotator<'_> {
    fn words(&self, ws: &[&str]) -> Vec<TokenId> {
        ws.iter().map(|w| self.grammar.vocab.word(w)).collect()
    }

    fn base(
        &self,
        demo: &Demonstration,
        frame: usize,
        is_keyframe: bool,
        trace: &Trace,
        region: Option<Region>,
    ) -> CotRecord {
        let instr = self.words(&demo.task.instruction_words());
        CotRecord {
            task: demo.task.name.clone(),
            demo_seed: demo.seed,
            frame_id: frame,
            is_keyframe,
            prompt: PromptContext::new(&demo.frames[frame], instr, self.policy),
            target: self.grammar.render(trace),
            tool_region: region,
        }
    }

    pub fn annotate_keyframe(
        &self,
        demo: &Demonstration,
        frame: usize,
    ) -> Result<CotRecord, AnnotateError> {
        if frame >= demo.len() {
            return Err(AnnotateError::FrameOutOfRange(frame));
        }
        if !detect_keyframes(demo).contains(&frame) {
            return Err(AnnotateError::NotKeyframe(frame));
        }
        let step = demo.plan.steps[frame];
        let state = &demo.states[frame];
        let img = &demo.frames[frame].image;
        let cell = state.objects[step.target].cell;
        let cell_px = img.width / state.grid_size;
        if cell.0 >= state.grid_size || cell.1 >= state.grid_size {
            return Err(AnnotateError::TargetOffscreen(frame));
        }
        let region = target_region(cell, cell_px, (img.width, img.height));
        let mut first: Vec<&str> = step.class.words();
        let mut confirm = vec!["confirm"];
        match step.phase {
            Phase::Grasp => {
                first.push("grasp");
                if let Some(m) = step.class.marking {
                    confirm.push(m.word());
                }
                confirm.push(if cell.0 == state.gripper_pos.0 {
                    "here"
                } else {
                    "right"
                });
            }
            _ => {
                first.push("release");
                confirm.push("here");
            }
        }
        let trace = Trace {
            segments: vec![
                Segment::Think(self.words(&first)),
                Segment::ToolCall(ToolSpec {
                    name: "zoom_in".into(),
                    region,
                }),
                Segment::Evidence,
                Segment::Think(self.words(&confirm)),
                Segment::Action(demo.plan.chunks[frame].actions().to_vec()),
            ],
        };
        Ok(self.base(demo, frame, true, &trace, Some(region)))
    }

    pub fn annotate_intermediate(
        &self,
        demo: &Demonstration,
        frame: usize,
    ) -> Result<CotRecord, AnnotateError> {
        if frame >= demo.len() {
            return Err(AnnotateError::FrameOutOfRange(frame));
        }
        if detect_keyframes(demo).contains(&frame) {
            return Err(AnnotateError::IsKeyframe(frame));
        }
        let step = demo.plan.steps[frame];
        let mut words = step.class.words();
        words.push("toward");
        let trace = Trace {
            segments: vec![
                Segment::Think(self.words(&words)),
                Segment::Action(demo.plan.chunks[frame].actions().to_vec()),
            ],
        };
        Ok(self.base(demo, frame, false, &trace, None))
    }

    /// Records for every frame of a demonstration, in frame order.
    pub fn annotate(&self, demo: &Demonstration) -> Result<Vec<CotRecord>, AnnotateError> {
        let keys = detect_keyframes(demo);
        (0..demo.len())
            .map(|i| {
                if keys.contains(&i) {
                    self.annotate_keyframe(demo, i)
                } else {
                    self.annotate_intermediate(demo, i)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum ValidationError {
    #[error("grammar: {kind:?} at token {position}")]
    Grammar {
        kind: ParseErrorKind,
        position: usize,
    },
    #[error("keyframe record without a tool call")]
    KeyframeWithoutTool,
    #[error("intermediate record with a tool call")]
    ToolOnIntermediate,
    #[error("keyframe flag disagrees with the gripper transitions")]
    KeyframeMismatch,
    #[error("action chunk differs from the expert chunk at this frame")]
    ChunkMismatch,
    #[error("frame {frame} is outside the demonstration of {len} frames")]
    FrameOutOfRange { frame: usize, len: usize },
    #[error("frame {frame} precedes the previous record's frame {prev}")]
    FrameOrder { prev: usize, frame: usize },
    #[error("prompt context differs from the referenced frame")]
    PromptMismatch,
    #[error("tool region lies outside the frame")]
    RegionOutOfFrame,
    #[error("tool region field disagrees with the tool call tokens")]
    RegionMismatch,
}

/// Checks one record against its demonstration; returns every violation found.
pub fn validate_trace(
    grammar: &Grammar,
    policy: &PolicyConfig,
    record: &CotRecord,
    demo: &Demonstration,
    prev_frame: Option<usize>,
) -> Result<(), Vec<ValidationError>> {
    use ValidationError::*;
    let mut errs = Vec::new();
    let parsed = grammar.parse(&record.target);
    let trace = match parsed {
        Ok(t) => Some(t),
        Err(e) => {
            errs.push(Grammar {
                kind: e.kind,
                position: e.position,
            });
            None
        }
    };
    let token_region = trace
        .as_ref()
        .and_then(|t| t.tool_calls().next().map(|c| c.region));
    let has_tool = match &trace {
        Some(t) => t.num_tool_calls() > 0,
        None => record.tool_region.is_some(),
    };
    if record.is_keyframe && !has_tool {
        errs.push(KeyframeWithoutTool);
    }
    if !record.is_keyframe && has_tool {
        errs.push(ToolOnIntermediate);
    }
    if let Some(prev) = prev_frame {
        if record.frame_id < prev {
            errs.push(FrameOrder {
                prev,
                frame: record.frame_id,
            });
        }
    }
    let (fw, fh) = demo
        .frames
        .first()
        .map_or((0, 0), |f| (f.image.width, f.image.height));
    if let Some(r) = record.tool_region {
        if !r.fits(fw, fh) {
            errs.push(RegionOutOfFrame);
        }
    }
    if trace.is_some() && token_region != record.tool_region {
        errs.push(RegionMismatch);
    }
    if record.frame_id >= demo.len() {
        errs.push(FrameOutOfRange {
            frame: record.frame_id,
            len: demo.len(),
        });
    } else {
        let f = record.frame_id;
        if detect_keyframes(demo).contains(&f) != record.is_keyframe {
            errs.push(KeyframeMismatch);
        }
        if let Some(acts) = trace.as_ref().and_then(|t| t.action()) {
            if acts != demo.plan.chunks[f].actions() {
                errs.push(ChunkMismatch);
            }
        }
        let expected =
            PromptContext::new(&demo.frames[f], record.prompt.instruction.clone(), policy);
        if expected != record.prompt {
            errs.push(PromptMismatch);
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

/// Per-task or per-tier record counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub demos: usize,
    pub records: usize,
    pub keyframe_records: usize,
    pub intermediate_records: usize,
}

impl Counts {
    fn add(&mut self, demos: usize, keyframes: usize, records: usize) {
        self.demos += demos;
        self.records += records;
        self.keyframe_records += keyframes;
        self.intermediate_records += records - keyframes;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: Counts,
    pub per_task: BTreeMap<String, Counts>,
    pub per_tier: BTreeMap<String, Counts>,
}

/// Validated records with the frames they reference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<CotRecord>,
    /// `frame_refs[i]` indexes `frames` for record `i`.
    pub frame_refs: Vec<usize>,
    pub frames: Vec<Observation>,
    pub stats: DatasetStats,
    pub demos: Vec<DemoStepLine>,
}

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("annotation: {0}")]
    Annotate(#[from] AnnotateError),
    #[error("record {task}/{seed}/frame {frame} failed validation: {errors:?}")]
    Invalid {
        task: String,
        seed: u64,
        frame: usize,
        errors: Vec<ValidationError>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset: {0}")]
    Format(String),
}

/// Dataset parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForgeConfig {
    pub demos_per_task: usize,
    pub seed: u64,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            demos_per_task: 100,
            seed: 0,
        }
    }
}

fn tier_name(t: Tier) -> String {
    format!("{t:?}")
}

/// Runs expert, annotator and validator over the suite; aborts on the first invalid record.
pub fn build_dataset(
    suite: &TaskSuite,
    cfg: &ForgeConfig,
    env: &EnvConfig,
    grammar: &Grammar,
    policy: &PolicyConfig,
) -> Result<Dataset, ForgeError> {
    let ann = Annotator { grammar, policy };
    let mut ds = Dataset::default();
    for task in &suite.tasks {
        ds.stats.per_task.entry(task.name.clone()).or_default();
        ds.stats.per_tier.entry(tier_name(task.tier)).or_default();
        for j in 0..cfg.demos_per_task {
            let seed = derived_seed("demo", cfg.seed, &task.name, j as u64);
            let demo = Demonstration::record(env, task, seed)?;
            let records = ann.annotate(&demo)?;
            let mut prev = None;
            for r in &records {
                if let Err(errors) = validate_trace(grammar, policy, r, &demo, prev) {
                    return Err(ForgeError::Invalid {
                        task: task.name.clone(),
                        seed,
                        frame: r.frame_id,
                        errors,
                    });
                }
                prev = Some(r.frame_id);
            }
            let keys = records.iter().filter(|r| r.is_keyframe).count();
            for c in [
                &mut ds.stats.total,
                ds.stats.per_task.entry(task.name.clone()).or_default(),
                ds.stats.per_tier.entry(tier_name(task.tier)).or_default(),
            ] {
                c.add(1, keys, records.len());
            }
            let base = ds.frames.len();
            ds.frames.extend(demo.frames.iter().cloned());
            ds.frame_refs
                .extend(records.iter().map(|r| base + r.frame_id));
            ds.records.extend(records);
            ds.demos.extend(demo.dump_lines());
        }
    }
    Ok(ds)
}

/// Reference to evidence pixels: a frame-store index plus the zoom parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceRef {
    pub frame: usize,
    pub region: Region,
    pub resolution: u32,
}

/// One line of the dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetLine {
    pub task_id: String,
    pub demo_seed: u64,
    pub frame_id: usize,
    pub frame_ref: usize,
    pub is_keyframe: bool,
    pub prompt_tokens: Vec<TokenId>,
    pub target_tokens: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_region: Option<Region>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_ref: Option<EvidenceRef>,
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const FRAMES_FILE: &str = "frames.bin";
pub const STATS_FILE: &str = "stats.json";
pub const DEMOS_FILE: &str = "demos.jsonl";
const FRAME_MAGIC: &[u8; 8] = b"ZVLAFRM\0";

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lines(&self, evidence_res: u32) -> Vec<DatasetLine> {
        self.records
            .iter()
            .zip(&self.frame_refs)
            .map(|(r, &f)| DatasetLine {
                task_id: r.task.clone(),
                demo_seed: r.demo_seed,
                frame_id: r.frame_id,
                frame_ref: f,
                is_keyframe: r.is_keyframe,
                prompt_tokens: r.prompt.instruction.clone(),
                target_tokens: r.target.clone(),
                tool_region: r.tool_region,
                evidence_ref: r.tool_region.map(|region| EvidenceRef {
                    frame: f,
                    region,
                    resolution: evidence_res,
                }),
            })
            .collect()
    }

    /// Writes the dataset, frame store, stats and demonstration dump into `dir`.
    pub fn write(&self, dir: &Path, evidence_res: u32) -> Result<(), ForgeError> {
        std::fs::create_dir_all(dir)?;
        let mut out = BufWriter::new(std::fs::File::create(dir.join(DATASET_FILE))?);
        for line in self.lines(evidence_res) {
            serde_json::to_writer(&mut out, &line)
                .map_err(|e| ForgeError::Format(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        let mut demos = BufWriter::new(std::fs::File::create(dir.join(DEMOS_FILE))?);
        for line in &self.demos {
            serde_json::to_writer(&mut demos, line)
                .map_err(|e| ForgeError::Format(e.to_string()))?;
            demos.write_all(b"\n")?;
        }
        demos.flush()?;
        write_frames(&dir.join(FRAMES_FILE), &self.frames)?;
        let stats = serde_json::to_string_pretty(&self.stats)
            .map_err(|e| ForgeError::Format(e.to_string()))?;
        std::fs::write(dir.join(STATS_FILE), stats + "\n")?;
        Ok(())
    }

    /// Loads a dataset written by [`Dataset::write`], rebuilding prompt contexts from the frame store.
    pub fn read(dir: &Path, policy: &PolicyConfig) -> Result<Dataset, ForgeError> {
        let frames = read_frames(&dir.join(FRAMES_FILE))?;
        let file = std::io::BufReader::new(std::fs::File::open(dir.join(DATASET_FILE))?);
        let mut ds = Dataset {
            frames,
            ..Dataset::default()
        };
        for (n, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: DatasetLine = serde_json::from_str(&line)
                .map_err(|e| ForgeError::Format(format!("line {}: {e}", n + 1)))?;
            let obs = ds.frames.get(l.frame_ref).ok_or_else(|| {
                ForgeError::Format(format!("line {}: frame {} missing", n + 1, l.frame_ref))
            })?;
            ds.records.push(CotRecord {
                task: l.task_id,
                demo_seed: l.demo_seed,
                frame_id: l.frame_id,
                is_keyframe: l.is_keyframe,
                prompt: PromptContext::new(obs, l.prompt_tokens, policy),
                target: l.target_tokens,
                tool_region: l.tool_region,
            });
            ds.frame_refs.push(l.frame_ref);
        }
        let stats = std::fs::read_to_string(dir.join(STATS_FILE))?;
        ds.stats = serde_json::from_str(&stats).map_err(|e| ForgeError::Format(e.to_string()))?;
        Ok(ds)
    }

    /// Evidence payloads of record `i`, re-executed from the frame store.
    pub fn evidence(&self, i: usize, registry: &ToolRegistry) -> Vec<EvidencePayload> {
        let r = &self.records[i];
        let img = &self.frames[self.frame_refs[i]].image;
        r.tool_region
            .map(|region| {
                execute_tool_call(
                    registry,
                    &ToolSpec {
                        name: "zoom_in".into(),
                        region,
                    },
                    img,
                )
            })
            .into_iter()
            .collect()
    }

    /// The supervised step of record `i`.
    pub fn step(&self, i: usize, grammar: &Grammar, registry: &ToolRegistry) -> StepTrace {
        StepTrace::from_tokens(
            self.records[i].target.clone(),
            self.evidence(i, registry),
            &grammar.vocab,
            grammar.chunk_len,
        )
    }
}

fn write_frames(path: &Path, frames: &[Observation]) -> Result<(), ForgeError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(FRAME_MAGIC)?;
    out.write_all(&(frames.len() as u64).to_le_bytes())?;
    for f in frames {
        out.write_all(&f.image.width.to_le_bytes())?;
        out.write_all(&f.image.height.to_le_bytes())?;
        out.write_all(&f.proprio.x.to_le_bytes())?;
        out.write_all(&f.proprio.y.to_le_bytes())?;
        out.write_all(&[u8::from(f.proprio.closed)])?;
        out.write_all(&f.image.data)?;
    }
    out.flush()?;
    Ok(())
}

fn read_frames(path: &Path) -> Result<Vec<Observation>, ForgeError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| ForgeError::Format(format!("frame store: {m}"));
    if bytes.len() < 16 || &bytes[..8] != FRAME_MAGIC {
        return Err(bad("bad header"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let mut pos = 16;
    let mut take = |k: usize| -> Result<&[u8], ForgeError> {
        let s = bytes.get(pos..pos + k).ok_or_else(|| bad("truncated"))?;
        pos += k;
        Ok(s)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let width = u32_at(take(4)?);
        let height = u32_at(take(4)?);
        let x = u32_at(take(4)?);
        let y = u32_at(take(4)?);
        let closed = take(1)?[0] != 0;
        let data = take((width * height * 3) as usize)?.to_vec();
        frames.push(Observation {
            image: Image {
                width,
                height,
                data,
            },
            proprio: Proprio { x, y, closed },
        });
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(frames)
}
