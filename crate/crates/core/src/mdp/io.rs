//! JSON-lines persistence for datasets.
//!
//! Line 1 is a header with the environment fingerprint, spaces and role.
//! Every following line is one transition. Rewards (and optional scores) are
//! written with 17 significant digits so they parse back bit-exactly.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Dataset, Domain, Space, Spaces, Trajectory, Transition};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    env_fingerprint: String,
    role: Domain,
    state_space: Space,
    action_space: Space,
    n_trajectories: usize,
    n_transitions: usize,
}

#[derive(Deserialize)]
struct Line<S, A> {
    traj_id: usize,
    step: usize,
    state: S,
    action: A,
    next_state: S,
    reward: f64,
    domain_tag: Domain,
    #[serde(default)]
    score: Option<f64>,
}

fn exact(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        // JSON has no representation for these; readers will reject them.
        "null".to_string()
    }
}

fn write_inner<S, A, W>(ds: &Dataset<S, A>, scores: Option<&[f64]>, mut w: W) -> Result<()>
where
    S: Serialize + Clone,
    A: Serialize + Clone,
    W: Write,
{
    let header = Header {
        env_fingerprint: ds.fingerprint.clone(),
        role: ds.role,
        state_space: ds.spaces.state,
        action_space: ds.spaces.action,
        n_trajectories: ds.trajectories.len(),
        n_transitions: ds.n_transitions(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).map_err(|e| Error::Parse(e.to_string()))?)?;
    for (i, t) in ds.transitions().enumerate() {
        write!(
            w,
            "{{\"traj_id\":{},\"step\":{},\"state\":{},\"action\":{},\"next_state\":{},\"reward\":{},\"domain_tag\":\"{}\"",
            t.traj_id,
            t.step,
            to_json(&t.state)?,
            to_json(&t.action)?,
            to_json(&t.next_state)?,
            exact(t.reward),
            t.domain.as_str()
        )?;
        if let Some(s) = scores {
            write!(w, ",\"score\":{}", exact(s[i]))?;
        }
        writeln!(w, "}}")?;
    }
    w.flush()?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Parse(e.to_string()))
}

pub fn write_jsonl<S, A, W>(ds: &Dataset<S, A>, w: W) -> Result<()>
where
    S: Serialize + Clone,
    A: Serialize + Clone,
    W: Write,
{
    write_inner(ds, None, w)
}

/// Same layout with an extra `score` field per transition.
pub fn write_scored_jsonl<S, A, W>(ds: &Dataset<S, A>, scores: &[f64], w: W) -> Result<()>
where
    S: Serialize + Clone,
    A: Serialize + Clone,
    W: Write,
{
    if scores.len() != ds.n_transitions() {
        return Err(Error::DimensionMismatch { expected: ds.n_transitions(), got: scores.len() });
    }
    write_inner(ds, Some(scores), w)
}

/// Reads a dataset; scores are returned when every line carries one.
pub fn read_jsonl<S, A, R>(r: R) -> Result<(Dataset<S, A>, Option<Vec<f64>>)>
where
    S: DeserializeOwned + PartialEq + Clone,
    A: DeserializeOwned + Clone,
    R: BufRead,
{
    let mut lines = r.lines();
    let header_line = lines.next().ok_or(Error::Empty("dataset file"))??;
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| Error::Parse(format!("header: {e}")))?;

    let mut trajectories = Vec::new();
    let mut current: Vec<Transition<S, A>> = Vec::new();
    let mut scores = Vec::new();
    let mut all_scored = true;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line<S, A> =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?;
        match l.score {
            Some(s) => scores.push(s),
            None => all_scored = false,
        }
        if let Some(last) = current.last() {
            if last.traj_id != l.traj_id {
                trajectories.push(Trajectory::new(std::mem::take(&mut current))?);
            }
        }
        current.push(Transition {
            traj_id: l.traj_id,
            step: l.step,
            state: l.state,
            action: l.action,
            next_state: l.next_state,
            reward: l.reward,
            domain: l.domain_tag,
        });
    }
    if !current.is_empty() {
        trajectories.push(Trajectory::new(current)?);
    }
    let ds = Dataset {
        trajectories,
        role: header.role,
        fingerprint: header.env_fingerprint,
        spaces: Spaces { state: header.state_space, action: header.action_space },
    };
    if ds.n_transitions() != header.n_transitions || ds.trajectories.len() != header.n_trajectories {
        return Err(Error::Parse(format!(
            "header announces {} transitions in {} trajectories, found {} in {}",
            header.n_transitions,
            header.n_trajectories,
            ds.n_transitions(),
            ds.trajectories.len()
        )));
    }
    let scores = (all_scored && !scores.is_empty()).then_some(scores);
    Ok((ds, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{generate_dataset, make_env, EnvSpec, TabularPolicy};
    use proptest::prelude::*;

    #[test]
    fn tabular_round_trip() {
        let mdp = make_env(&EnvSpec::cliff(5, 3, 0.2)).unwrap();
        let ds = generate_dataset(&mdp, &TabularPolicy::uniform(15, 4), 20, 15, 4, Domain::Target).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&ds, &mut buf).unwrap();
        let (back, scores): (Dataset, _) = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        assert!(scores.is_none());
        let first = String::from_utf8(buf).unwrap();
        assert!(first.lines().next().unwrap().contains(&mdp.fingerprint()));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mdp = make_env(&EnvSpec::grid(3, 3, 0.2)).unwrap();
        let ds = generate_dataset(&mdp, &TabularPolicy::uniform(9, 4), 3, 5, 4, Domain::Source).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(read_jsonl::<usize, usize, _>(cut.as_bytes()).is_err());
    }

    fn one_traj(rewards: Vec<f64>, state: Vec<f64>) -> Dataset<Vec<f64>, Vec<f64>> {
        let transitions = rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| Transition {
                traj_id: 3,
                step: i + 1,
                state: state.clone(),
                action: vec![r],
                next_state: state.clone(),
                reward: r,
                domain: Domain::Source,
            })
            .collect();
        Dataset {
            trajectories: vec![Trajectory::new(transitions).unwrap()],
            role: Domain::Source,
            fingerprint: "abc".into(),
            spaces: Spaces { state: Space::Box(state.len()), action: Space::Box(1) },
        }
    }

    proptest! {
        #[test]
        fn rewards_and_scores_are_bit_exact(
            rewards in proptest::collection::vec(-1e6f64..1e6, 1..20),
            state in proptest::collection::vec(-10.0f64..10.0, 1..4),
        ) {
            let ds = one_traj(rewards.clone(), state);
            let scores: Vec<f64> = rewards.iter().map(|r| 1.0 / (1.0 + (-r).exp())).collect();
            let mut buf = Vec::new();
            write_scored_jsonl(&ds, &scores, &mut buf).unwrap();
            let (back, back_scores) = read_jsonl::<Vec<f64>, Vec<f64>, _>(buf.as_slice()).unwrap();
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            let got: Vec<f64> = back.transitions().map(|t| t.reward).collect();
            prop_assert_eq!(bits(&got), bits(&rewards));
            prop_assert_eq!(bits(&back_scores.unwrap()), bits(&scores));
            prop_assert_eq!(back, ds);
        }
    }
}
