use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_unique_ranks, AgentProfile};

/// One parallel slot: agents tried one after another, best rank first.
pub type Lane = Vec<String>;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanePlan {
    pub lanes: Vec<Lane>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[serde(alias = "seq")]
    Sequential,
    #[serde(alias = "par")]
    Parallel,
    #[default]
    #[serde(rename = "fp2")]
    Fp2,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Sequential, Strategy::Fp2, Strategy::Parallel];

    pub fn short_name(self) -> &'static str {
        match self {
            Strategy::Sequential => "seq",
            Strategy::Parallel => "par",
            Strategy::Fp2 => "fp2",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" | "sequential" => Ok(Strategy::Sequential),
            "par" | "parallel" => Ok(Strategy::Parallel),
            "fp2" => Ok(Strategy::Fp2),
            other => Err(Error::InvalidInput(format!("unknown strategy {other:?}"))),
        }
    }
}

fn by_rank(agents: &[AgentProfile]) -> Vec<&AgentProfile> {
    let mut sorted: Vec<&AgentProfile> = agents.iter().collect();
    sorted.sort_by_key(|a| a.preference_rank);
    sorted
}

impl LanePlan {
    /// Every agent in one lane.
    pub fn sequential(agents: &[AgentProfile]) -> Result<Self> {
        check_unique_ranks(agents)?;
        Ok(Self {
            lanes: vec![by_rank(agents).iter().map(|a| a.agent_name.clone()).collect()],
        })
    }

    /// One lane per agent.
    pub fn parallel(agents: &[AgentProfile]) -> Result<Self> {
        check_unique_ranks(agents)?;
        Ok(Self {
            lanes: by_rank(agents)
                .iter()
                .map(|a| vec![a.agent_name.clone()])
                .collect(),
        })
    }

    pub fn for_strategy(strategy: Strategy, agents: &[AgentProfile], num_lanes: usize) -> Result<Self> {
        match strategy {
            Strategy::Sequential => Self::sequential(agents),
            Strategy::Parallel => Self::parallel(agents),
            Strategy::Fp2 => plan_lanes(agents, num_lanes),
        }
    }

    pub fn heads(&self) -> impl Iterator<Item = &str> {
        self.lanes.iter().filter_map(|l| l.first().map(String::as_str))
    }

    pub fn agent_count(&self) -> usize {
        self.lanes.iter().map(Vec::len).sum()
    }

    /// Checks the plan against the agent set: full coverage, rank order
    /// inside lanes, and distinct head providers when enough exist.
    pub fn check(&self, agents: &[AgentProfile]) -> Vec<String> {
        let mut problems = Vec::new();
        let find = |name: &str| agents.iter().find(|a| a.agent_name == name);
        let mut seen = BTreeSet::new();
        for (i, lane) in self.lanes.iter().enumerate() {
            if lane.is_empty() {
                problems.push(format!("lane {i} is empty"));
            }
            let mut prev = None;
            for name in lane {
                let Some(agent) = find(name) else {
                    problems.push(format!("lane {i} names unknown agent {name}"));
                    continue;
                };
                if !seen.insert(name.as_str()) {
                    problems.push(format!("agent {name} appears twice"));
                }
                if prev.is_some_and(|p| p >= agent.preference_rank) {
                    problems.push(format!("lane {i} is not in rank order at {name}"));
                }
                prev = Some(agent.preference_rank);
            }
        }
        for a in agents {
            if !seen.contains(a.agent_name.as_str()) {
                problems.push(format!("agent {} is not planned", a.agent_name));
            }
        }
        let providers: BTreeSet<&str> = agents.iter().map(|a| a.provider_id.as_str()).collect();
        let head_providers: Vec<&str> = self
            .heads()
            .filter_map(find)
            .map(|a| a.provider_id.as_str())
            .collect();
        let distinct: BTreeSet<&str> = head_providers.iter().copied().collect();
        if providers.len() >= self.lanes.len() && distinct.len() < head_providers.len() {
            problems.push(format!("lane heads share a provider: {head_providers:?}"));
        }
        problems
    }
}

/// Builds provider-aware parallel lanes with rank-ordered chains.
///
/// Lane heads are the best-ranked agent of each provider, best first, topped
/// up with the best remaining agents when there are fewer providers than
/// lanes. Every other agent, in rank order, joins a lane whose head outranks
/// it (so sorting cannot displace the head): among those, lanes whose tail
/// provider differs from the agent's are preferred, then the lane with the
/// fewest agents, then the lowest index. Each lane is finally sorted by rank.
pub fn plan_lanes(agents: &[AgentProfile], num_lanes: usize) -> Result<LanePlan> {
    if num_lanes == 0 {
        return Err(Error::InvalidConfig("num_lanes must be at least 1".into()));
    }
    if agents.is_empty() {
        return Err(Error::InvalidConfig("at least one agent is required".into()));
    }
    check_unique_ranks(agents)?;
    let sorted = by_rank(agents);
    let lanes_wanted = num_lanes.min(sorted.len());

    let mut head_idx: Vec<usize> = Vec::with_capacity(lanes_wanted);
    let mut head_providers = BTreeSet::new();
    for (i, a) in sorted.iter().enumerate() {
        if head_idx.len() == lanes_wanted {
            break;
        }
        if head_providers.insert(a.provider_id.as_str()) {
            head_idx.push(i);
        }
    }
    for i in 0..sorted.len() {
        if head_idx.len() == lanes_wanted {
            break;
        }
        if !head_idx.contains(&i) {
            head_idx.push(i);
        }
    }
    head_idx.sort_unstable();

    let mut lanes: Vec<Vec<&AgentProfile>> = head_idx.iter().map(|&i| vec![sorted[i]]).collect();
    for (i, agent) in sorted.iter().enumerate() {
        if head_idx.contains(&i) {
            continue;
        }
        let eligible: Vec<usize> = (0..lanes.len())
            .filter(|&l| lanes[l][0].preference_rank < agent.preference_rank)
            .collect();
        let differs: Vec<usize> = eligible
            .iter()
            .copied()
            .filter(|&l| lanes[l].last().unwrap().provider_id != agent.provider_id)
            .collect();
        let pool = if differs.is_empty() { &eligible } else { &differs };
        let target = *pool
            .iter()
            .min_by_key(|&&l| (lanes[l].len(), l))
            .expect("the first lane's head outranks every other agent");
        lanes[target].push(agent);
    }

    Ok(LanePlan {
        lanes: lanes
            .into_iter()
            .map(|mut lane| {
                lane.sort_by_key(|a| a.preference_rank);
                lane.into_iter().map(|a| a.agent_name.clone()).collect()
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agents(spec: &[(&str, &str)]) -> Vec<AgentProfile> {
        spec.iter()
            .enumerate()
            .map(|(i, (n, p))| AgentProfile::new(*n, *p, i as u32 + 1))
            .collect()
    }

    #[test]
    fn two_providers_two_lanes() {
        let a = agents(&[("a1", "provA"), ("a2", "provB"), ("a3", "provA"), ("a4", "provB")]);
        let plan = plan_lanes(&a, 2).unwrap();
        let heads: Vec<_> = plan.heads().collect();
        assert_eq!(heads, ["a1", "a2"]);
        assert!(plan.check(&a).is_empty(), "{:?}", plan.check(&a));
        assert_eq!(plan.agent_count(), 4);
    }

    #[test]
    fn singleton() {
        let a = agents(&[("a1", "p")]);
        assert_eq!(plan_lanes(&a, 1).unwrap().lanes, vec![vec!["a1".to_owned()]]);
    }

    #[test]
    fn zero_lanes_is_config_error() {
        let a = agents(&[("a1", "p")]);
        assert!(matches!(plan_lanes(&a, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn head_provider_found_past_same_provider_runner_up() {
        // A greedy tail-only rule would head both lanes with provider A here.
        let a = agents(&[("a1", "A"), ("a2", "A"), ("a3", "B")]);
        let plan = plan_lanes(&a, 2).unwrap();
        assert_eq!(plan.lanes, vec![vec!["a1".to_owned(), "a2".to_owned()], vec!["a3".to_owned()]]);
        assert!(plan.check(&a).is_empty());
    }

    #[test]
    fn more_lanes_than_agents_caps_lanes() {
        let a = agents(&[("a1", "A"), ("a2", "B")]);
        let plan = plan_lanes(&a, 5).unwrap();
        assert_eq!(plan.lanes.len(), 2);
    }

    #[test]
    fn strategy_plans() {
        let a = agents(&[("a1", "A"), ("a2", "B"), ("a3", "C")]);
        assert_eq!(LanePlan::sequential(&a).unwrap().lanes.len(), 1);
        assert_eq!(LanePlan::parallel(&a).unwrap().lanes.len(), 3);
        assert_eq!("fp2".parse::<Strategy>().unwrap(), Strategy::Fp2);
        assert!("x".parse::<Strategy>().is_err());
    }
}
