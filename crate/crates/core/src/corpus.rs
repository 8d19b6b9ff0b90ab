//! Impression logs: the observed `(user, shown list, selections)` records,
//! their on-disk formats, leave-one-out splitting and item coldness buckets.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mathcore::RandomStream;

/// Dense-id table: dense id `i` was read as `raw[i]`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    raw: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdMap {
    /// Raw ids `"0" .. "n-1"` mapped onto themselves.
    pub fn identity(n: usize) -> Self {
        let raw: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let index = raw
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i as u32))
            .collect();
        IdMap { raw, index }
    }

    #[allow(dead_code)]
    fn from_raw(raw: Vec<String>) -> Self {
        let index = raw
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i as u32))
            .collect();
        IdMap { raw, index }
    }

    fn intern(&mut self, raw: &str) -> u32 {
        if let Some(&id) = self.index.get(raw) {
            return id;
        }
        let id = self.raw.len() as u32;
        self.raw.push(raw.to_string());
        self.index.insert(raw.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw(&self, dense: u32) -> &str {
        &self.raw[dense as usize]
    }

    pub fn dense(&self, raw: &str) -> Option<u32> {
        self.index.get(raw).copied()
    }
}

/// One shown list and the user's response to each slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub user: u32,
    pub items: Vec<u32>,
    pub selected: Vec<bool>,
}

impl Record {
    pub fn new(user: u32, items: Vec<u32>, selected: Vec<bool>) -> Self {
        debug_assert_eq!(items.len(), selected.len());
        Record {
            user,
            items,
            selected,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Slot indices the user selected.
    pub fn selected_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.selected
            .iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(t, _)| t)
    }

    pub fn selected_items(&self) -> impl Iterator<Item = u32> + '_ {
        self.selected_slots().map(move |t| self.items[t])
    }

    pub fn has_selection(&self) -> bool {
        self.selected.iter().any(|&s| s)
    }
}

/// The observed dataset.
///
/// Synthetic logs keep a constant list length; MIND impressions vary in
/// length, so only an upper bound is enforced in general.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionLog {
    users: IdMap,
    items: IdMap,
    records: Vec<Record>,
}

impl InteractionLog {
    /// Log over identity-mapped ids `0..n_users` and `0..n_items`.
    pub fn from_records(n_users: usize, n_items: usize, records: Vec<Record>) -> Result<Self> {
        let log = InteractionLog {
            users: IdMap::identity(n_users),
            items: IdMap::identity(n_items),
            records,
        };
        log.validate()?;
        Ok(log)
    }

    fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.items.is_empty() {
                return Err(Error::domain(format!("record {i} has an empty list")));
            }
            if r.items.len() != r.selected.len() {
                return Err(Error::domain(format!("record {i} has mismatched labels")));
            }
            if r.user as usize >= self.users.len() {
                return Err(Error::domain(format!(
                    "record {i} names user {} out of range",
                    r.user
                )));
            }
            if let Some(j) = r.items.iter().find(|&&j| j as usize >= self.items.len()) {
                return Err(Error::domain(format!(
                    "record {i} names item {j} out of range"
                )));
            }
        }
        Ok(())
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn user_ids(&self) -> &IdMap {
        &self.users
    }

    pub fn item_ids(&self) -> &IdMap {
        &self.items
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Common list length, if every record has the same one.
    pub fn list_len(&self) -> Option<usize> {
        let first = self.records.first()?.len();
        self.records
            .iter()
            .all(|r| r.len() == first)
            .then_some(first)
    }

    pub fn max_list_len(&self) -> usize {
        self.records.iter().map(Record::len).max().unwrap_or(0)
    }

    /// Number of selected slots in the whole log.
    pub fn positive_count(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.selected.iter().filter(|&&s| s).count())
            .sum()
    }

    /// Distinct positively-interacted items per user.
    pub fn user_positives(&self) -> Vec<BTreeSet<u32>> {
        let mut out = vec![BTreeSet::new(); self.n_users()];
        for r in &self.records {
            out[r.user as usize].extend(r.selected_items());
        }
        out
    }

    /// Distinct items shown to each user.
    pub fn user_exposures(&self) -> Vec<BTreeSet<u32>> {
        let mut out = vec![BTreeSet::new(); self.n_users()];
        for r in &self.records {
            out[r.user as usize].extend(r.items.iter().copied());
        }
        out
    }

    /// Selected-slot occurrences per item.
    pub fn item_positive_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_items()];
        for r in &self.records {
            for j in r.selected_items() {
                counts[j as usize] += 1;
            }
        }
        counts
    }

    /// Records grouped by user, in log order.
    pub fn records_by_user(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_users()];
        for (i, r) in self.records.iter().enumerate() {
            out[r.user as usize].push(i);
        }
        out
    }

    pub fn write_native<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            let items: Vec<&str> = r.items.iter().map(|&j| self.items.raw(j)).collect();
            let labels: Vec<&str> = r
                .selected
                .iter()
                .map(|&s| if s { "1" } else { "0" })
                .collect();
            writeln!(
                out,
                "{}\t{}\t{}",
                self.users.raw(r.user),
                items.join(","),
                labels.join(",")
            )?;
        }
        Ok(())
    }

    pub fn save_native(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_native(&mut out)?;
        out.flush()?;
        Ok(())
    }
}

fn open_input(path: &Path, what: &str) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: format!("{what} not found"),
            },
            _ => Error::Io(e),
        })
}

struct RawRecord {
    user: String,
    items: Vec<String>,
    selected: Vec<bool>,
}

fn all_numeric<'a>(mut ids: impl Iterator<Item = &'a String>) -> bool {
    ids.all(|s| !s.is_empty() && s.len() < 10 && s.bytes().all(|b| b.is_ascii_digit()))
}

fn numeric_map<'a>(ids: impl Iterator<Item = &'a String>) -> IdMap {
    let n = ids
        .map(|s| s.parse::<usize>().unwrap() + 1)
        .max()
        .unwrap_or(0);
    IdMap::identity(n)
}

/// Reads the native three-column TSV log.
///
/// When every raw id is a plain non-negative integer the ids are kept as the
/// dense ids; otherwise ids are numbered in order of first appearance.
pub fn read_native_log<R: BufRead>(input: R) -> Result<InteractionLog> {
    let mut raw = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                lineno,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let items: Vec<String> = fields[1].split(',').map(|s| s.trim().to_string()).collect();
        let labels: Vec<&str> = fields[2].split(',').map(str::trim).collect();
        if items.iter().any(String::is_empty) {
            return Err(Error::parse(lineno, "empty item id"));
        }
        if items.len() != labels.len() {
            return Err(Error::parse(
                lineno,
                format!("{} items but {} labels", items.len(), labels.len()),
            ));
        }
        let selected = labels
            .iter()
            .map(|l| match *l {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::parse(
                    lineno,
                    format!("label `{other}` is not 0 or 1"),
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        raw.push(RawRecord {
            user: fields[0].trim().to_string(),
            items,
            selected,
        });
    }

    let numeric_users = all_numeric(raw.iter().map(|r| &r.user));
    let numeric_items = all_numeric(raw.iter().flat_map(|r| r.items.iter()));
    let mut users = if numeric_users {
        numeric_map(raw.iter().map(|r| &r.user))
    } else {
        IdMap::default()
    };
    let mut items = if numeric_items {
        numeric_map(raw.iter().flat_map(|r| r.items.iter()))
    } else {
        IdMap::default()
    };

    let records = raw
        .into_iter()
        .map(|r| {
            let user = if numeric_users {
                r.user.parse::<u32>().unwrap()
            } else {
                users.intern(&r.user)
            };
            let list = r
                .items
                .iter()
                .map(|j| {
                    if numeric_items {
                        j.parse::<u32>().unwrap()
                    } else {
                        items.intern(j)
                    }
                })
                .collect();
            Record::new(user, list, r.selected)
        })
        .collect();
    Ok(InteractionLog {
        users,
        items,
        records,
    })
}

pub fn load_native_log(path: &Path) -> Result<InteractionLog> {
    read_native_log(open_input(path, "interaction log")?)
}

/// Reads a MIND `behaviors.tsv` stream, keeping the lines of the first
/// `max_users` distinct users.
pub fn read_mind_behaviors<R: BufRead>(input: R, max_users: usize) -> Result<InteractionLog> {
    let mut users = IdMap::default();
    let mut items = IdMap::default();
    let mut records = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::parse(
                lineno,
                format!("expected 5 tab-separated fields, found {}", fields.len()),
            ));
        }
        let raw_user = fields[1];
        if users.dense(raw_user).is_none() && users.len() >= max_users {
            continue;
        }
        let mut list = Vec::new();
        let mut selected = Vec::new();
        for token in fields[4].split_whitespace() {
            let (item, label) = token.rsplit_once('-').ok_or_else(|| {
                Error::parse(
                    lineno,
                    format!("impression `{token}` lacks a -label suffix"),
                )
            })?;
            if item.is_empty() {
                return Err(Error::parse(
                    lineno,
                    format!("impression `{token}` has no item id"),
                ));
            }
            let flag = match label {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::parse(
                        lineno,
                        format!("unknown impression label `{other}`"),
                    ))
                }
            };
            list.push(items.intern(item));
            selected.push(flag);
        }
        if list.is_empty() {
            return Err(Error::parse(lineno, "impression list is empty"));
        }
        let user = users.intern(raw_user);
        records.push(Record::new(user, list, selected));
    }
    Ok(InteractionLog {
        users,
        items,
        records,
    })
}

pub fn load_mind_behaviors(path: &Path, max_users: usize) -> Result<InteractionLog> {
    read_mind_behaviors(open_input(path, "MIND behaviors file")?, max_users)
}

/// Train log plus one held-out positive per eligible user.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPair {
    pub train: InteractionLog,
    /// `(user, held-out item)`, ordered by user id.
    pub test: Vec<(u32, u32)>,
    /// Users with fewer than two distinct positives.
    pub skipped_users: usize,
}

/// Holds out one uniformly chosen positive item per user with at least two
/// distinct positives; every selection of that item by the user is turned
/// into a non-selection in the training log.
pub fn leave_one_out_split(log: &InteractionLog, stream: &mut RandomStream) -> Result<SplitPair> {
    if log.is_empty() {
        return Err(Error::domain("cannot split an empty log"));
    }
    let positives = log.user_positives();
    let mut held: Vec<Option<u32>> = vec![None; log.n_users()];
    let mut test = Vec::new();
    let mut skipped = 0;
    for (u, items) in positives.iter().enumerate() {
        if items.len() < 2 {
            skipped += 1;
            continue;
        }
        let pick = stream.index(items.len());
        let item = *items.iter().nth(pick).unwrap();
        held[u] = Some(item);
        test.push((u as u32, item));
    }
    let mut train = log.clone();
    for r in &mut train.records {
        if let Some(item) = held[r.user as usize] {
            for (j, s) in r.items.iter().zip(r.selected.iter_mut()) {
                if *j == item {
                    *s = false;
                }
            }
        }
    }
    Ok(SplitPair {
        train,
        test,
        skipped_users: skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Coldness {
    Low,
    Middle,
    High,
}

impl Coldness {
    pub const ALL: [Coldness; 3] = [Coldness::Low, Coldness::Middle, Coldness::High];

    pub fn label(self) -> &'static str {
        match self {
            Coldness::Low => "low",
            Coldness::Middle => "middle",
            Coldness::High => "high",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColdnessBuckets {
    pub low_max: usize,
    pub high_min: usize,
    buckets: Vec<Coldness>,
}

impl ColdnessBuckets {
    pub fn bucket(&self, item: u32) -> Coldness {
        self.buckets[item as usize]
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn count(&self, bucket: Coldness) -> usize {
        self.buckets.iter().filter(|&&b| b == bucket).count()
    }

    fn from_counts(counts: &[usize], low_max: usize, high_min: usize) -> Result<Self> {
        if low_max > high_min {
            return Err(Error::domain(format!(
                "low threshold {low_max} exceeds high threshold {high_min}"
            )));
        }
        let buckets = counts
            .iter()
            .map(|&c| {
                if c < low_max {
                    Coldness::Low
                } else if c > high_min {
                    Coldness::High
                } else {
                    Coldness::Middle
                }
            })
            .collect();
        Ok(ColdnessBuckets {
            low_max,
            high_min,
            buckets,
        })
    }
}

/// Buckets items by their number of positive interactions in `train`:
/// `< low_max` is low, `> high_min` is high, the rest middle.
pub fn coldness_buckets(
    train: &InteractionLog,
    low_max: usize,
    high_min: usize,
) -> Result<ColdnessBuckets> {
    ColdnessBuckets::from_counts(&train.item_positive_counts(), low_max, high_min)
}
