//! Next-post attack simulators.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Post, UserSequence};
use crate::error::{Error, Result};
use crate::hash::Fnv64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Re-post one of the victim's own historical posts.
    CopyAppend,
    /// Post taken from a user of the opposite label.
    ForeignPost,
    /// Text sampled from an n-gram chain fitted on opposite-label posts.
    NgramGen,
    /// Leaves the sequence unchanged.
    Identity,
}

impl AttackKind {
    pub const EVAL: [AttackKind; 3] = [AttackKind::CopyAppend, AttackKind::ForeignPost, AttackKind::NgramGen];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::CopyAppend => "copy_append",
            AttackKind::ForeignPost => "foreign_post",
            AttackKind::NgramGen => "ngram_gen",
            AttackKind::Identity => "identity",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    /// Accepts both the full names and the short forms `copy`, `foreign`, `ngram`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy_append" | "copy" => Ok(AttackKind::CopyAppend),
            "foreign_post" | "foreign" => Ok(AttackKind::ForeignPost),
            "ngram_gen" | "ngram" => Ok(AttackKind::NgramGen),
            "identity" => Ok(AttackKind::Identity),
            other => Err(Error::config(format!("unknown attack `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub seed: u64,
    pub ngram_order: usize,
    pub target_len: usize,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, seed: u64) -> Self {
        AttackSpec {
            kind,
            seed,
            ngram_order: 2,
            target_len: 30,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        AttackSpec { seed, ..self }
    }
}

/// Order-`k` Markov chain over token ids: `k − 1` tokens of context.
#[derive(Debug, Clone, Default)]
pub struct NgramChain {
    order: usize,
    starts: Vec<Vec<usize>>,
    next: HashMap<Vec<usize>, Vec<usize>>,
}

impl NgramChain {
    pub fn fit<'a>(posts: impl IntoIterator<Item = &'a [usize]>, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::config("ngram_order must be at least 1"));
        }
        let ctx = order - 1;
        let mut chain = NgramChain {
            order,
            ..Default::default()
        };
        for p in posts {
            if p.is_empty() {
                continue;
            }
            chain.starts.push(p[..ctx.max(1).min(p.len())].to_vec());
            for i in ctx..p.len() {
                chain.next.entry(p[i - ctx..i].to_vec()).or_default().push(p[i]);
            }
        }
        Ok(chain)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Successors of `context` with multiplicity, if any were observed.
    pub fn successors(&self, context: &[usize]) -> Option<&[usize]> {
        self.next.get(context).map(Vec::as_slice)
    }

    /// Walks the chain from a sampled start until `len` tokens or a context
    /// with no observed successor.
    pub fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
        let mut out = self.starts.choose(rng)?.clone();
        out.truncate(len);
        let ctx = self.order - 1;
        while out.len() < len {
            let Some(succ) = self.successors(&out[out.len() - ctx..]) else {
                break;
            };
            out.push(*succ.choose(rng)?);
        }
        Some(out)
    }
}

/// An attack bound to the corpus it draws material from.
#[derive(Debug, Clone)]
pub struct Attacker<'a> {
    spec: AttackSpec,
    corpus: &'a [UserSequence],
    by_label: [Vec<usize>; 2],
    chains: [Option<NgramChain>; 2],
}

impl<'a> Attacker<'a> {
    pub fn new(spec: AttackSpec, corpus: &'a [UserSequence]) -> Result<Self> {
        if spec.target_len == 0 {
            return Err(Error::config("target_len must be at least 1"));
        }
        let mut by_label: [Vec<usize>; 2] = Default::default();
        for (i, u) in corpus.iter().enumerate() {
            if u.label > 1 {
                return Err(Error::contract(format!("user {} has label {}", u.user_id, u.label)));
            }
            if !u.posts.is_empty() {
                by_label[usize::from(u.label)].push(i);
            }
        }
        let mut chains: [Option<NgramChain>; 2] = Default::default();
        if spec.kind == AttackKind::NgramGen {
            for (label, idx) in by_label.iter().enumerate() {
                let ids: Vec<Vec<usize>> = idx
                    .iter()
                    .flat_map(|&i| &corpus[i].posts)
                    .map(Post::valid_ids)
                    .collect();
                chains[label] = Some(NgramChain::fit(ids.iter().map(Vec::as_slice), spec.ngram_order)?);
            }
        }
        Ok(Attacker {
            spec,
            corpus,
            by_label,
            chains,
        })
    }

    pub fn spec(&self) -> &AttackSpec {
        &self.spec
    }

    fn rng_for(&self, user: &UserSequence) -> ChaCha8Rng {
        let seed = Fnv64::new()
            .u64(self.spec.seed)
            .str(self.spec.kind.as_str())
            .str(&user.user_id)
            .finish();
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// The adversarial next post for `user`, as token ids. `None` for the
    /// identity attack.
    pub fn generate_post(&self, user: &UserSequence) -> Result<Option<Vec<usize>>> {
        let mut rng = self.rng_for(user);
        let Some(own) = user.posts.choose(&mut rng) else {
            return Err(Error::contract(format!("user {} has no posts", user.user_id)));
        };
        let opposite = usize::from(user.label == 0);
        let no_source = || Error::contract(format!("no user with label {opposite} to draw an attack post from"));
        let ids = match self.spec.kind {
            AttackKind::Identity => return Ok(None),
            AttackKind::CopyAppend => own.valid_ids(),
            AttackKind::ForeignPost => {
                let &donor = self.by_label[opposite].choose(&mut rng).ok_or_else(no_source)?;
                let post = self.corpus[donor].posts.choose(&mut rng).ok_or_else(no_source)?;
                post.valid_ids()
            }
            AttackKind::NgramGen => self.chains[opposite]
                .as_ref()
                .and_then(|c| c.sample(self.spec.target_len, &mut rng))
                .ok_or_else(no_source)?,
        };
        Ok(Some(ids))
    }

    /// `user` with the generated post appended under the window rule.
    pub fn attack(&self, user: &UserSequence, window: usize, tokens_per_post: usize) -> Result<UserSequence> {
        match self.generate_post(user)? {
            None => Ok(user.clone()),
            Some(ids) => apply_attack(user, &ids, window, tokens_per_post),
        }
    }

    pub fn attack_all(
        &self,
        users: &[UserSequence],
        window: usize,
        tokens_per_post: usize,
    ) -> Result<Vec<UserSequence>> {
        users.iter().map(|u| self.attack(u, window, tokens_per_post)).collect()
    }
}

/// Appends `new_post` and keeps the most recent `window` posts.
pub fn apply_attack(
    user: &UserSequence,
    new_post: &[usize],
    window: usize,
    tokens_per_post: usize,
) -> Result<UserSequence> {
    if new_post.is_empty() {
        return Err(Error::contract("apply_attack: empty post"));
    }
    let mut out = user.clone();
    out.posts.push(Post::from_ids(new_post, tokens_per_post));
    let excess = out.posts.len().saturating_sub(window);
    out.posts.drain(..excess);
    Ok(out)
}
