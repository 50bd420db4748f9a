use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::param_digest;
use super::{poly_lr, role_rng, round_f32, Checkpoint, Config, RngState, Role, Schedule, Sgd};
use crate::conv_lstm::ConvLstmParams;
use crate::data::{sample_triplet, VideoClip};
use crate::error::{Error, Result};
use crate::io::{append_line, write_atomic};
use crate::losses::{total_objective, LossBreakdown, ObjectiveConfig, SequenceInputs};
use crate::models::{NetOutput, SegmentationNet, TinyNet};

const TEACHER_INIT_STREAM: u64 = 1;
const STUDENT_INIT_STREAM: u64 = 2;
const SAMPLER_STREAM: u64 = 3;

/// Knobs that change how a run is driven, not what it computes.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Stop once this many iterations have completed.
    pub stop_after: Option<usize>,
    pub resume: Option<Checkpoint>,
    /// JSON-lines loss log, appended to.
    pub log_path: Option<&'a Path>,
    pub checkpoint_dir: Option<&'a Path>,
    /// Save every this many iterations; 0 saves only at the end.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    /// Batch mean of ‖E^T‖ when the multi-frame term is active.
    pub teacher_embedding_norm: Option<f64>,
}

impl IterationLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log entry serialises")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Entries of the iterations run by this call.
    pub log: Vec<IterationLog>,
}

/// Pre-trains the teacher on cross-entropy plus, when configured, the
/// temporal loss.
pub fn train_teacher(
    config: &Config,
    clips: &[VideoClip],
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    run(Role::Teacher, config, clips, None, opts)
}

/// Distils a student from a frozen teacher under the configured terms.
pub fn train_student(
    config: &Config,
    clips: &[VideoClip],
    teacher: &TinyNet,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    run(Role::Student, config, clips, Some(teacher), opts)
}

struct State {
    net: TinyNet,
    sgd: Sgd,
    lstm: Option<(ConvLstmParams, Sgd)>,
    rng: ChaCha8Rng,
    iteration: usize,
}

fn initial_state(role: Role, config: &Config, objective: &ObjectiveConfig) -> Result<State> {
    let (net_cfg, stream) = match role {
        Role::Teacher => (config.teacher_net(), TEACHER_INIT_STREAM),
        Role::Student => (config.student_net(), STUDENT_INIT_STREAM),
    };
    let mut init = role_rng(config.seed, stream);
    let mut net = TinyNet::new(net_cfg, &mut init)?;
    net.param_slices_mut().into_iter().for_each(round_f32);
    let sgd = Sgd::new(config.train.momentum, net.param_count());
    let lstm = if role == Role::Student && objective.terms.mf {
        let m = &config.model;
        let mut p = if m.lstm_init_scale > 0.0 {
            ConvLstmParams::random(m.lstm_hidden, m.lstm_kernel, m.lstm_init_scale, &mut init)?
        } else {
            ConvLstmParams::zeros(m.lstm_hidden, m.lstm_kernel)?
        };
        p.for_each_mut(|v| *v = *v as f32 as f64);
        let n = p.param_count();
        Some((p, Sgd::new(config.train.momentum, n)))
    } else {
        None
    };
    Ok(State {
        net,
        sgd,
        lstm,
        rng: role_rng(config.seed, SAMPLER_STREAM),
        iteration: 0,
    })
}

fn resumed_state(role: Role, config: &Config, ck: Checkpoint) -> Result<State> {
    if ck.role != role {
        return Err(Error::validation(format!(
            "cannot resume a {} run from a {} checkpoint",
            role, ck.role
        )));
    }
    if &ck.config != config {
        return Err(Error::validation(
            "resume config differs from the checkpoint's config",
        ));
    }
    let mut sgd = Sgd::new(config.train.momentum, ck.net.param_count());
    sgd.buffer = ck.net_momentum;
    let lstm = match (ck.lstm, ck.lstm_momentum) {
        (Some(p), Some(m)) => {
            let mut s = Sgd::new(config.train.momentum, p.param_count());
            s.buffer = m;
            Some((p, s))
        }
        _ => None,
    };
    Ok(State {
        net: ck.net,
        sgd,
        lstm,
        rng: ck.rng.restore()?,
        iteration: ck.iteration,
    })
}

fn snapshot(
    role: Role,
    config: &Config,
    state: &State,
    max_iterations: usize,
    teacher_digest: Option<&String>,
) -> Checkpoint {
    Checkpoint {
        role,
        iteration: state.iteration,
        max_iterations,
        config: config.clone(),
        net: state.net.clone(),
        net_momentum: state.sgd.buffer.clone(),
        lstm: state.lstm.as_ref().map(|(p, _)| p.clone()),
        lstm_momentum: state.lstm.as_ref().map(|(_, s)| s.buffer.clone()),
        rng: RngState::capture(&state.rng, config.seed),
        teacher_digest: teacher_digest.cloned(),
    }
}

/// Loss and gradients of one sampled triplet, accumulated into the
/// gradient buffers.
fn triplet_step(
    state: &mut State,
    clips: &[VideoClip],
    config: &Config,
    objective: &ObjectiveConfig,
    teacher: Option<&TinyNet>,
    g_net: &mut TinyNet,
    g_lstm: Option<&mut ConvLstmParams>,
) -> Result<(LossBreakdown, Option<f64>)> {
    let clip = &clips[state.rng.gen_range(0..clips.len())];
    let tri = sample_triplet(clip, config.train.window, &mut state.rng)?;
    let (indices, flows) = if objective.terms.needs_sequence() {
        (tri.indices.to_vec(), tri.flows.to_vec())
    } else {
        (vec![tri.indices[1]], Vec::new())
    };
    let frames: Vec<_> = indices.iter().map(|&i| clip.frames[i].clone()).collect();
    let labels: Vec<_> = indices.iter().map(|&i| clip.label_at(i).cloned()).collect();
    let traces = frames
        .iter()
        .map(|f| state.net.forward_traced(f))
        .collect::<Result<Vec<_>>>()?;
    let student: Vec<NetOutput> = traces.iter().map(|t| t.output().clone()).collect();
    let teacher_out = match teacher {
        Some(t) if objective.terms.needs_teacher() => Some(
            frames
                .iter()
                .map(|f| t.forward(f))
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };
    let seq = SequenceInputs {
        frames: &frames,
        flows: &flows,
        labels: &labels,
        student: &student,
        teacher: teacher_out.as_deref(),
    };
    let lstm = state.lstm.as_ref().map(|(p, _)| p);
    let (loss, grads) = total_objective(&seq, objective, lstm)?;
    for (k, trace) in traces.iter().enumerate() {
        state
            .net
            .backward(trace, &grads.probs[k], grads.features[k].as_ref(), g_net)?;
    }
    if let (Some(acc), Some(g)) = (g_lstm, grads.lstm) {
        let sum: Vec<f64> = acc.iter().zip(g.iter()).map(|(a, b)| a + b).collect();
        acc.load_flat(&sum)?;
    }
    Ok((loss, grads.teacher_embedding.map(|e| e.norm())))
}

fn run(
    role: Role,
    config: &Config,
    clips: &[VideoClip],
    teacher: Option<&TinyNet>,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if clips.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    let objective = match role {
        Role::Teacher => config.train.teacher_objective(),
        Role::Student => config.train.student_objective(),
    };
    let max_iterations = match role {
        Role::Teacher => config.train.teacher_iterations,
        Role::Student => config.train.max_iterations,
    };
    let teacher_digest = teacher.map(param_digest);
    if let (Some(ck), Some(d)) = (&opts.resume, &teacher_digest) {
        if ck.teacher_digest.as_ref() != Some(d) {
            return Err(Error::validation(
                "resume checkpoint was trained against a different teacher",
            ));
        }
    }
    let mut state = match opts.resume {
        Some(ck) => resumed_state(role, config, ck)?,
        None => initial_state(role, config, &objective)?,
    };
    let schedule = Schedule::new(&config.train, max_iterations);
    let batch = config.train.batch_size;
    let mut log = Vec::new();
    while state.iteration < max_iterations && opts.stop_after.map_or(true, |s| state.iteration < s)
    {
        let iteration = state.iteration;
        let lr = poly_lr(iteration, &schedule)?;
        let mut g_net = state.net.zeros_like();
        let mut g_lstm = state.lstm.as_ref().map(|(p, _)| p.zeros_like());
        let mut parts = Vec::with_capacity(batch);
        let mut norms = Vec::new();
        for _ in 0..batch {
            let (loss, norm) = triplet_step(
                &mut state,
                clips,
                config,
                &objective,
                teacher,
                &mut g_net,
                g_lstm.as_mut(),
            )?;
            parts.push(loss);
            norms.extend(norm);
        }
        let entry = IterationLog {
            iteration,
            lr,
            loss: LossBreakdown::mean(&parts),
            teacher_embedding_norm: (!norms.is_empty())
                .then(|| norms.iter().sum::<f64>() / norms.len() as f64),
        };
        if let Some(p) = opts.log_path {
            append_line(p, &entry.to_json())?;
        }
        if !entry.loss.is_finite() {
            if let Some(dir) = opts.checkpoint_dir {
                let dump = format!(
                    "iteration = {iteration}\nlr = {lr}\nlog = '{}'\n",
                    entry.to_json()
                );
                write_atomic(&dir.join("divergence.toml"), dump.as_bytes())?;
            }
            return Err(Error::Divergence {
                iteration,
                reason: format!("non-finite loss {:?}", entry.loss),
            });
        }
        let scale = 1.0 / batch as f64;
        let grads: Vec<Vec<f64>> = g_net
            .param_slices()
            .iter()
            .map(|s| s.iter().map(|g| g * scale).collect())
            .collect();
        state.sgd.step(
            state.net.param_slices_mut(),
            grads.iter().map(Vec::as_slice).collect(),
            lr,
        );
        if let (Some((p, sgd)), Some(g)) = (state.lstm.as_mut(), g_lstm) {
            let mut flat = p.flatten();
            let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
            sgd.step(vec![&mut flat], vec![&g], lr);
            p.load_flat(&flat)?;
            p.clip_in_place(config.train.clip_min, config.train.clip_max)?;
        }
        log.push(entry);
        state.iteration += 1;
        if let Some(dir) = opts.checkpoint_dir {
            let every = opts.checkpoint_every;
            if every > 0 && state.iteration % every == 0 {
                snapshot(
                    role,
                    config,
                    &state,
                    max_iterations,
                    teacher_digest.as_ref(),
                )
                .save(dir)?;
            }
        }
    }
    let checkpoint = snapshot(
        role,
        config,
        &state,
        max_iterations,
        teacher_digest.as_ref(),
    );
    if let Some(dir) = opts.checkpoint_dir {
        checkpoint.save(dir)?;
    }
    Ok(TrainOutcome { checkpoint, log })
}
