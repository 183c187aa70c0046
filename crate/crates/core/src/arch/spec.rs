use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Resolution ladder such as `32x10,16x10,8x10,4x10,1x10`: each entry is a
/// spatial resolution and the number of blocks run at it.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    ladder: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Decreasing,
    Increasing,
}

impl BlockSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let err = |reason: String| Error::BlockSpec {
            text: text.to_string(),
            reason,
        };
        let mut ladder = Vec::new();
        for token in text.split(',') {
            let token = token.trim();
            let (r, c) = token
                .split_once('x')
                .ok_or_else(|| err(format!("token {token:?} is not RxC")))?;
            let res: usize = r
                .trim()
                .parse()
                .map_err(|_| err(format!("bad resolution in {token:?}")))?;
            let count: usize = c
                .trim()
                .parse()
                .map_err(|_| err(format!("bad block count in {token:?}")))?;
            if res == 0 || count == 0 {
                return Err(err(format!("{token:?}: resolution and count must be positive")));
            }
            ladder.push((res, count));
        }
        Self::from_ladder(ladder).map_err(|e| match e {
            Error::BlockSpec { reason, .. } => err(reason),
            other => other,
        })
    }

    pub fn from_ladder(ladder: Vec<(usize, usize)>) -> Result<Self> {
        let err = |reason: String| Error::BlockSpec {
            text: format!("{ladder:?}"),
            reason,
        };
        if ladder.is_empty() {
            return Err(err("empty spec".into()));
        }
        if ladder.iter().any(|&(r, c)| r == 0 || c == 0) {
            return Err(err("resolution and count must be positive".into()));
        }
        let increasing = ladder.windows(2).all(|w| w[0].0 < w[1].0);
        let decreasing = ladder.windows(2).all(|w| w[0].0 > w[1].0);
        if !(increasing || decreasing) {
            return Err(err("resolutions must be strictly monotone".into()));
        }
        for w in ladder.windows(2) {
            let (a, b) = (w[0].0.max(w[1].0), w[0].0.min(w[1].0));
            if a % b != 0 {
                return Err(err(format!("{a} is not an integer multiple of {b}")));
            }
        }
        Ok(BlockSpec { ladder })
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.ladder
    }

    pub fn total_blocks(&self) -> usize {
        self.ladder.iter().map(|&(_, c)| c).sum()
    }

    pub fn resolutions(&self) -> impl Iterator<Item = usize> + '_ {
        self.ladder.iter().map(|&(r, _)| r)
    }

    pub fn first_resolution(&self) -> usize {
        self.ladder[0].0
    }

    pub fn last_resolution(&self) -> usize {
        self.ladder[self.ladder.len() - 1].0
    }

    pub fn max_resolution(&self) -> usize {
        self.resolutions().max().unwrap_or(1)
    }

    pub fn follows(&self, dir: Direction) -> bool {
        self.ladder.windows(2).all(|w| match dir {
            Direction::Decreasing => w[0].0 > w[1].0,
            Direction::Increasing => w[0].0 < w[1].0,
        })
    }

    /// Blocks per entry, in order.
    pub fn counts(&self) -> Vec<usize> {
        self.ladder.iter().map(|&(_, c)| c).collect()
    }
}

impl fmt::Display for BlockSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.ladder.iter().map(|(r, c)| format!("{r}x{c}")).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for BlockSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockSpec::parse(s)
    }
}

/// One set of top-down blocks that all read the same input state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockGroup {
    pub resolution: usize,
    /// Index of the first block within its resolution.
    pub first: usize,
    pub len: usize,
}

/// Order in which decoder blocks are executed and which of them share an
/// input. `K = 1` is ordinary sequential conditioning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionPlan {
    pub groups: Vec<BlockGroup>,
}

impl ExecutionPlan {
    /// Number of sequential conditioning steps.
    pub fn stochastic_depth(&self) -> usize {
        self.groups.len()
    }
}

/// Make every `k` consecutive blocks at a resolution conditionally
/// independent: they read the same input, and their residual updates are
/// summed into the next group's input. Parameters are unaffected.
pub fn group_independent(dec_spec: &BlockSpec, k: usize) -> Result<ExecutionPlan> {
    if k == 0 {
        return Err(Error::Config("independence group size must be >= 1".into()));
    }
    let mut groups = Vec::new();
    for &(res, count) in dec_spec.entries() {
        if count % k != 0 {
            return Err(Error::Config(format!(
                "group size {k} does not tile {count} blocks at resolution {res}"
            )));
        }
        for first in (0..count).step_by(k) {
            groups.push(BlockGroup {
                resolution: res,
                first,
                len: k,
            });
        }
    }
    Ok(ExecutionPlan { groups })
}
