use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPost {
    pub text: String,
    pub ts: i64,
}

/// One corpus record: a labelled user with chronologically ordered posts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawUser {
    pub user_id: String,
    pub label: u8,
    pub posts: Vec<RawPost>,
}

/// Reads a corpus file: one JSON object per line, blank lines ignored.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<RawUser>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, path)
}

pub fn parse_corpus(text: &str, path: &Path) -> Result<Vec<RawUser>> {
    let mut users = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let user: RawUser = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if user.label > 1 {
            return Err(err(format!("label must be 0 or 1, got {}", user.label)));
        }
        if user.posts.windows(2).any(|w| w[1].ts < w[0].ts) {
            return Err(err(format!("posts of {} are not ordered by ts", user.user_id)));
        }
        users.push(user);
    }
    Ok(users)
}

pub fn write_corpus(users: &[RawUser], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for u in users {
        out.push_str(&serde_json::to_string(u).expect("corpus records serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
