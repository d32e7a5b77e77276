//! Corpus ingestion, preprocessing, vocabulary, cross-validation splits and
//! the synthetic corpus generator.

mod corpus;
mod preprocess;
mod split;
mod synth;

pub use corpus::{load_corpus, parse_corpus, write_corpus, RawPost, RawUser};
pub use preprocess::{
    detokenize, encode_users, filter_users, preprocess, tokenize, PreprocessSettings, TokenizedUser, Vocab, PAD_ID,
    PAD_TOKEN, UNK_ID, UNK_TOKEN,
};
pub use split::{fold_hash, kfold_split, stratified_holdout, Fold};
pub use synth::gen_synthetic;

/// One post as `d` token slots; `mask[i]` marks real (non-padding) tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Post {
    ids: Vec<usize>,
    mask: Vec<bool>,
}

impl Post {
    /// Truncates or pads `tokens` to exactly `d` slots.
    pub fn from_ids(tokens: &[usize], d: usize) -> Post {
        let n = tokens.len().min(d);
        let mut ids = tokens[..n].to_vec();
        ids.resize(d, PAD_ID);
        let mut mask = vec![true; n];
        mask.resize(d, false);
        Post { ids, mask }
    }

    /// Arbitrary slot layout, e.g. padding in the middle. Lengths must agree.
    pub fn with_mask(ids: Vec<usize>, mask: Vec<bool>) -> crate::Result<Post> {
        if ids.len() != mask.len() {
            return Err(crate::Error::Shape {
                op: "post",
                lhs: vec![ids.len()],
                rhs: vec![mask.len()],
            });
        }
        Ok(Post { ids, mask })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn slots(&self) -> usize {
        self.ids.len()
    }

    /// `(position, id)` of every unmasked slot.
    pub fn tokens(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.ids
            .iter()
            .zip(&self.mask)
            .enumerate()
            .filter(|(_, (_, &m))| m)
            .map(|(p, (&id, _))| (p, id))
    }

    pub fn valid_ids(&self) -> Vec<usize> {
        self.tokens().map(|(_, id)| id).collect()
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A user's most recent posts in chronological order, ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSequence {
    pub user_id: String,
    pub label: u8,
    pub posts: Vec<Post>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }
}

pub fn labels(users: &[UserSequence]) -> Vec<u8> {
    users.iter().map(|u| u.label).collect()
}
