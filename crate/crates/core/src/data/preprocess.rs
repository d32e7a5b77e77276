use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use super::{Post, RawPost, RawUser, UserSequence};
use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessSettings {
    /// Token slots per post (`d`).
    pub tokens_per_post: usize,
    /// Most recent posts kept per user (`T`).
    pub window: usize,
    pub min_post_tokens: usize,
    pub min_posts: usize,
    pub min_freq: usize,
}

impl Default for PreprocessSettings {
    fn default() -> Self {
        PreprocessSettings {
            tokens_per_post: 30,
            window: 20,
            min_post_tokens: 5,
            min_posts: 5,
            min_freq: 2,
        }
    }
}

/// A user that survived filtering; posts are already cut to `d` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedUser {
    pub user_id: String,
    pub label: u8,
    pub posts: Vec<Vec<String>>,
}

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Drops short posts, then users left with too few posts, then keeps the most
/// recent `window` posts. Output is ordered by `user_id`.
pub fn filter_users(users: &[RawUser], s: &PreprocessSettings) -> Vec<TokenizedUser> {
    let mut out: Vec<TokenizedUser> = users
        .iter()
        .filter_map(|u| {
            let mut posts: Vec<Vec<String>> = u
                .posts
                .iter()
                .map(|p| tokenize(&p.text))
                .filter(|toks| toks.len() >= s.min_post_tokens)
                .collect();
            if posts.len() < s.min_posts {
                return None;
            }
            let skip = posts.len().saturating_sub(s.window);
            posts.drain(..skip);
            for p in &mut posts {
                p.truncate(s.tokens_per_post);
            }
            Some(TokenizedUser {
                user_id: u.user_id.clone(),
                label: u.label,
                posts,
            })
        })
        .collect();
    out.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    out
}

/// Token ↔ id map with `<pad>` = 0 and `<unk>` = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Counts tokens of `users` and keeps those seen at least `min_freq`
    /// times, ordered by descending count then lexicographically.
    pub fn build(users: &[TokenizedUser], min_freq: usize) -> Vocab {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for tok in users.iter().flat_map(|u| u.posts.iter().flatten()) {
            if tok != PAD_TOKEN && tok != UNK_TOKEN {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq.max(1)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = [PAD_TOKEN, UNK_TOKEN]
            .into_iter()
            .chain(kept.into_iter().map(|(t, _)| t))
            .map(String::from)
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Out-of-vocabulary tokens, including a literal `<pad>`, map to UNK.
    pub fn id(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&PAD_ID) | None => UNK_ID,
            Some(&id) => id,
        }
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line `i` holds id `i`.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Vocab> {
        let tokens: Vec<String> = text.lines().map(String::from).collect();
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::Format(format!(
                "vocab must start with {PAD_TOKEN} and {UNK_TOKEN}"
            )));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocab> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

pub fn encode_users(users: &[TokenizedUser], vocab: &Vocab, tokens_per_post: usize) -> Vec<UserSequence> {
    users
        .iter()
        .map(|u| UserSequence {
            user_id: u.user_id.clone(),
            label: u.label,
            posts: u
                .posts
                .iter()
                .map(|p| {
                    let ids: Vec<usize> = p.iter().map(|t| vocab.id(t)).collect();
                    Post::from_ids(&ids, tokens_per_post)
                })
                .collect(),
        })
        .collect()
}

/// Filter, build the vocabulary on every surviving user and encode.
///
/// Cross-validation should instead call [`filter_users`], build the vocab on
/// the training fold only and then [`encode_users`].
pub fn preprocess(users: &[RawUser], s: &PreprocessSettings) -> Result<(Vec<UserSequence>, Vocab)> {
    if users.is_empty() {
        return Err(Error::contract("preprocess: empty user list"));
    }
    let kept = filter_users(users, s);
    if kept.is_empty() {
        return Err(Error::contract("preprocess: no user survived filtering"));
    }
    let vocab = Vocab::build(&kept, s.min_freq);
    Ok((encode_users(&kept, &vocab, s.tokens_per_post), vocab))
}

/// Maps sequences back to raw records (UNK ids become the literal `<unk>`).
pub fn detokenize(users: &[UserSequence], vocab: &Vocab) -> Vec<RawUser> {
    users
        .iter()
        .map(|u| RawUser {
            user_id: u.user_id.clone(),
            label: u.label,
            posts: u
                .posts
                .iter()
                .enumerate()
                .map(|(i, p)| RawPost {
                    text: p
                        .valid_ids()
                        .iter()
                        .map(|&id| vocab.token(id).unwrap_or(UNK_TOKEN))
                        .collect::<Vec<_>>()
                        .join(" "),
                    ts: i as i64,
                })
                .collect(),
        })
        .collect()
}
