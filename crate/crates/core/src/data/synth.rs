use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{RawPost, RawUser};
use crate::error::{Error, Result};

const CLASS_VOCAB: usize = 50;
const SHARED_VOCAB: usize = 100;

fn class_token(label: u8, i: usize) -> String {
    if label == 0 {
        format!("a{i:02}")
    } else {
        format!("b{i:02}")
    }
}

fn shared_token(i: usize) -> String {
    format!("s{i:03}")
}

/// Two-topic corpus: benign users draw from topic `a`, bad users from topic
/// `b`, each token with probability `class_sep`, otherwise from a shared
/// filler vocabulary. Labels alternate, so the classes are balanced.
pub fn gen_synthetic(n_users: usize, class_sep: f64, seed: u64) -> Result<Vec<RawUser>> {
    if n_users < 10 {
        return Err(Error::config(format!(
            "gen_synthetic needs at least 10 users, got {n_users}"
        )));
    }
    if !(0.0..=1.0).contains(&class_sep) {
        return Err(Error::config(format!("class_sep must be in [0, 1], got {class_sep}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = (0..n_users)
        .map(|u| {
            let label = (u % 2) as u8;
            let n_posts = rng.gen_range(8..=20);
            let mut ts: i64 = 1_500_000_000 + rng.gen_range(0..10_000_000);
            let posts = (0..n_posts)
                .map(|_| {
                    ts += rng.gen_range(60..86_400);
                    let n_tok = rng.gen_range(6..=30);
                    let text = (0..n_tok)
                        .map(|_| {
                            if rng.gen_bool(class_sep) {
                                class_token(label, rng.gen_range(0..CLASS_VOCAB))
                            } else {
                                shared_token(rng.gen_range(0..SHARED_VOCAB))
                            }
                        })
                        .collect::<Vec<_>>()
                        .join(" ");
                    RawPost { text, ts }
                })
                .collect();
            RawUser {
                user_id: format!("user{u:05}"),
                label,
                posts,
            }
        })
        .collect();
    Ok(users)
}
