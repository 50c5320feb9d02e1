//! On-disk split directory.
//!
//! ```text
//! meta.txt    key = value (max_len, user_count, item_count, dropped_users, fingerprint)
//! users.tsv   dense<TAB>raw
//! items.tsv   dense<TAB>raw
//! train.txt   user<TAB>space-separated history<TAB>target
//! valid.txt
//! test.txt
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{DatasetSplit, IdMap, SequenceExample};
use crate::error::{Error, Result};

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_map(path: &Path, map: &IdMap) -> Result<()> {
    write_file(path, |w| {
        for (dense, raw) in map.iter() {
            writeln!(w, "{dense}\t{raw}")?;
        }
        Ok(())
    })
}

fn write_examples(path: &Path, examples: &[SequenceExample]) -> Result<()> {
    write_file(path, |w| {
        for ex in examples {
            let hist: Vec<String> = ex.items().map(|i| i.to_string()).collect();
            writeln!(w, "{}\t{}\t{}", ex.user, hist.join(" "), ex.target)?;
        }
        Ok(())
    })
}

pub fn write_split(dir: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("meta.txt"), |w| {
        writeln!(w, "max_len = {}", split.max_len)?;
        writeln!(w, "user_count = {}", split.user_count)?;
        writeln!(w, "item_count = {}", split.item_count)?;
        writeln!(w, "dropped_users = {}", split.dropped_users)?;
        writeln!(w, "item_fingerprint = {}", split.item_fingerprint())
    })?;
    write_map(&dir.join("users.tsv"), &split.users)?;
    write_map(&dir.join("items.tsv"), &split.items)?;
    write_examples(&dir.join("train.txt"), &split.train)?;
    write_examples(&dir.join("valid.txt"), &split.valid)?;
    write_examples(&dir.join("test.txt"), &split.test)?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_owned(),
        line,
        message: message.into(),
    }
}

fn read_map(path: &Path, base: usize) -> Result<IdMap> {
    let mut raw = Vec::new();
    for (n, line) in read_text(path)?.lines().enumerate() {
        let (dense, name) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, n + 1, "expected dense<TAB>raw"))?;
        let dense: usize = dense
            .parse()
            .map_err(|_| parse_err(path, n + 1, "dense id is not an integer"))?;
        if dense != base + raw.len() {
            return Err(parse_err(path, n + 1, "dense ids must be contiguous"));
        }
        raw.push(name.to_owned());
    }
    Ok(IdMap::from_raw(base, raw))
}

fn read_examples(path: &Path, max_len: usize, item_count: usize) -> Result<Vec<SequenceExample>> {
    let mut out = Vec::new();
    for (n, line) in read_text(path)?.lines().enumerate() {
        let err = |m: &str| parse_err(path, n + 1, m);
        let mut fields = line.split('\t');
        let (Some(user), Some(hist), Some(target), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(err("expected user<TAB>history<TAB>target"));
        };
        let user: usize = user.parse().map_err(|_| err("bad user id"))?;
        let target: usize = target.parse().map_err(|_| err("bad target id"))?;
        let hist: Vec<usize> = hist
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err("bad history id"))?;
        if hist.is_empty() || hist.len() > max_len {
            return Err(err("history length outside 1..=max_len"));
        }
        if target == 0 || target > item_count || hist.iter().any(|&i| i == 0 || i > item_count) {
            return Err(err("item id out of range"));
        }
        out.push(SequenceExample::from_prefix(user, &hist, target, max_len));
    }
    Ok(out)
}

pub fn read_split(dir: &Path) -> Result<DatasetSplit> {
    let meta_path = dir.join("meta.txt");
    let meta = read_text(&meta_path)?;
    let get = |key: &str| -> Result<String> {
        meta.lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == key)
            .map(|(_, v)| v.trim().to_owned())
            .ok_or_else(|| parse_err(&meta_path, 0, format!("missing key `{key}`")))
    };
    let num = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| parse_err(&meta_path, 0, format!("`{key}` is not an integer")))
    };
    let max_len = num("max_len")?;
    let users = read_map(&dir.join("users.tsv"), 0)?;
    let items = read_map(&dir.join("items.tsv"), 1)?;
    if items.len() != num("item_count")? || users.len() != num("user_count")? {
        return Err(parse_err(&meta_path, 0, "counts disagree with id maps"));
    }
    if let Ok(fp) = get("item_fingerprint") {
        if fp != items.fingerprint() {
            return Err(parse_err(&meta_path, 0, "item map fingerprint mismatch"));
        }
    }
    let ic = items.len();
    Ok(DatasetSplit {
        item_count: ic,
        user_count: users.len(),
        max_len,
        train: read_examples(&dir.join("train.txt"), max_len, ic)?,
        valid: read_examples(&dir.join("valid.txt"), max_len, ic)?,
        test: read_examples(&dir.join("test.txt"), max_len, ic)?,
        users,
        items,
        dropped_users: num("dropped_users").unwrap_or(0),
    })
}
