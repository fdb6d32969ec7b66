//! Trials, fixation sequences and the JSONL manifest that carries them.
//!
//! One JSON object per line:
//!
//! ```text
//! {"kind":"trial","id":"t1","task":"array","target_img":"img/t1_target.png",
//!  "search_img":"img/t1_search.png","target_box":[x,y,w,h],
//!  "candidates":[{"id":"c0","box":[x,y,w,h]}, ...],"imagenet_class":null}
//! {"kind":"fixations","trial":"t1","subject":"s1","points":[[x,y], ...]}
//! ```
//!
//! Image paths are relative to the manifest's directory. Coordinates are
//! integer pixels with the origin at the top-left.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{image_dimensions, Rect};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Array,
    Natural,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    #[serde(rename = "box", with = "rect_array")]
    pub rect: Rect,
}

/// One search problem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub id: String,
    pub task: TaskType,
    /// As written in the manifest; resolve with [`Dataset::resolve`].
    pub target_img: PathBuf,
    pub search_img: PathBuf,
    pub target_box: Rect,
    pub candidates: Vec<Candidate>,
    pub imagenet_class: Option<u32>,
    pub width: usize,
    pub height: usize,
}

impl Trial {
    /// Id of the candidate whose box is the target box (array trials).
    pub fn target_candidate(&self) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.rect == self.target_box)
    }

    /// The candidate that contains (x, y), if any. Earlier candidates win overlaps.
    pub fn candidate_at(&self, x: i64, y: i64) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.rect.contains(x, y))
    }

    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64
    }

    /// Checks the trial invariants; `Err` carries a human-readable reason.
    pub fn check(&self) -> std::result::Result<(), String> {
        if !self.target_box.within(self.width, self.height) {
            return Err(format!(
                "target box {:?} outside the {}×{} image",
                self.target_box.to_array(),
                self.width,
                self.height
            ));
        }
        let mut ids = BTreeSet::new();
        for c in &self.candidates {
            if !ids.insert(c.id.as_str()) {
                return Err(format!("duplicate candidate id `{}`", c.id));
            }
            if !c.rect.within(self.width, self.height) {
                return Err(format!("candidate `{}` box outside the image", c.id));
            }
        }
        if self.task == TaskType::Array {
            let hits = self
                .candidates
                .iter()
                .filter(|c| c.rect == self.target_box)
                .count();
            if hits != 1 {
                return Err(format!(
                    "array trial target box must equal exactly one candidate box, found {hits}"
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub x: i64,
    pub y: i64,
    pub duration_ms: Option<f64>,
}

impl Fixation {
    pub fn at(x: i64, y: i64) -> Self {
        Self {
            x,
            y,
            duration_ms: None,
        }
    }
}

/// Recorded fixations of one subject on one trial, in recording order.
#[derive(Clone, Debug, PartialEq)]
pub struct FixationSequence {
    pub subject: String,
    pub trial: String,
    pub points: Vec<Fixation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub trials: Vec<Trial>,
    pub fixations: Vec<FixationSequence>,
}

impl Dataset {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn trial(&self, id: &str) -> Option<&Trial> {
        self.trials.iter().find(|t| t.id == id)
    }

    /// Sequences recorded on trial `id`, in manifest order.
    pub fn sequences_for<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a FixationSequence> + 'a {
        self.fixations.iter().filter(move |s| s.trial == id)
    }
}

mod rect_array {
    use super::Rect;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Rect, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(r.to_array())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rect, D::Error> {
        Ok(Rect::from_array(<[i64; 4]>::deserialize(d)?))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum Line {
    Trial {
        id: String,
        task: TaskType,
        target_img: String,
        search_img: String,
        #[serde(with = "rect_array")]
        target_box: Rect,
        candidates: Vec<Candidate>,
        imagenet_class: Option<u32>,
    },
    Fixations {
        trial: String,
        subject: String,
        points: Vec<[i64; 2]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        durations: Option<Vec<f64>>,
    },
}

/// Loads and validates a manifest. Every violation is reported with its
/// 1-based line number.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let fail = |line: usize, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let mut trials: Vec<Trial> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut pending: Vec<(usize, FixationSequence)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(raw).map_err(|e| fail(lineno, e.to_string()))?;
        match line {
            Line::Trial {
                id,
                task,
                target_img,
                search_img,
                target_box,
                candidates,
                imagenet_class,
            } => {
                if index.contains_key(&id) {
                    return Err(fail(lineno, format!("duplicate trial id `{id}`")));
                }
                let search_path = root.join(&search_img);
                let (width, height) = image_dimensions(&search_path).map_err(|e| fail(lineno, e.to_string()))?;
                image_dimensions(&root.join(&target_img)).map_err(|e| fail(lineno, e.to_string()))?;
                let trial = Trial {
                    id: id.clone(),
                    task,
                    target_img: target_img.into(),
                    search_img: search_img.into(),
                    target_box,
                    candidates,
                    imagenet_class,
                    width,
                    height,
                };
                trial.check().map_err(|r| fail(lineno, r))?;
                index.insert(id, trials.len());
                trials.push(trial);
            }
            Line::Fixations {
                trial,
                subject,
                points,
                durations,
            } => {
                if let Some(d) = &durations {
                    if d.len() != points.len() {
                        return Err(fail(lineno, "durations and points differ in length".into()));
                    }
                }
                let points = points
                    .iter()
                    .enumerate()
                    .map(|(k, &[x, y])| Fixation {
                        x,
                        y,
                        duration_ms: durations.as_ref().map(|d| d[k]),
                    })
                    .collect();
                pending.push((
                    lineno,
                    FixationSequence {
                        subject,
                        trial,
                        points,
                    },
                ));
            }
        }
    }

    for (lineno, seq) in &pending {
        let Some(&ti) = index.get(&seq.trial) else {
            return Err(fail(*lineno, format!("unknown trial `{}`", seq.trial)));
        };
        let t = &trials[ti];
        if let Some(f) = seq.points.iter().find(|f| !t.in_bounds(f.x, f.y)) {
            return Err(fail(
                *lineno,
                format!("fixation ({}, {}) outside the {}×{} image", f.x, f.y, t.width, t.height),
            ));
        }
    }

    Ok(Dataset {
        root,
        trials,
        fixations: pending.into_iter().map(|(_, s)| s).collect(),
    })
}

/// Serializes trials and sequences as manifest lines (trials first).
pub fn encode_manifest(trials: &[Trial], fixations: &[FixationSequence]) -> Result<String> {
    let mut out = String::new();
    for t in trials {
        let line = Line::Trial {
            id: t.id.clone(),
            task: t.task,
            target_img: t.target_img.to_string_lossy().into_owned(),
            search_img: t.search_img.to_string_lossy().into_owned(),
            target_box: t.target_box,
            candidates: t.candidates.clone(),
            imagenet_class: t.imagenet_class,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    for s in fixations {
        let durations = if s.points.iter().any(|p| p.duration_ms.is_some()) {
            Some(s.points.iter().map(|p| p.duration_ms.unwrap_or(0.0)).collect())
        } else {
            None
        };
        let line = Line::Fixations {
            trial: s.trial.clone(),
            subject: s.subject.clone(),
            points: s.points.iter().map(|p| [p.x, p.y]).collect(),
            durations,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, trials: &[Trial], fixations: &[FixationSequence]) -> Result<()> {
    std::fs::write(path, encode_manifest(trials, fixations)?).map_err(|e| Error::io(path, e))
}

/// Error fixations of one sequence: optionally drop the first (trial-start)
/// fixation, then keep everything before the first fixation that lands on
/// the target box grown by `margin` pixels.
pub fn filter_error_fixations(seq: &FixationSequence, trial: &Trial, skip_first: bool, margin: i64) -> Vec<Fixation> {
    seq.points
        .iter()
        .skip(usize::from(skip_first))
        .take_while(|f| !trial.target_box.contains_with_margin(f.x, f.y, margin))
        .copied()
        .collect()
}

/// Fixations shared across subjects.
///
/// `sequences` hold each subject's error fixations for the same trial.
/// Fixations are visited by scanpath position (then sequence order) and
/// greedily joined to the first cluster whose centroid is within `radius`
/// (Chebyshev); otherwise they open a new cluster. A cluster survives when
/// at least `min_subjects` distinct subjects have a member within `radius`
/// of its final centroid. Survivors come back as rounded centroids ordered
/// by their earliest member.
pub fn common_fixations(sequences: &[FixationSequence], radius: i64, min_subjects: usize) -> Result<Vec<Fixation>> {
    if sequences.len() < 2 {
        return Err(Error::invalid("common fixations need at least two sequences"));
    }
    struct Cluster {
        sx: f64,
        sy: f64,
        members: Vec<(usize, Fixation)>,
    }
    impl Cluster {
        fn centroid(&self) -> (f64, f64) {
            let n = self.members.len() as f64;
            (self.sx / n, self.sy / n)
        }
    }

    let longest = sequences.iter().map(|s| s.points.len()).max().unwrap_or(0);
    let mut clusters: Vec<Cluster> = Vec::new();
    for pos in 0..longest {
        for (si, seq) in sequences.iter().enumerate() {
            let Some(&f) = seq.points.get(pos) else {
                continue;
            };
            let near = clusters.iter_mut().find(|c| {
                let (cx, cy) = c.centroid();
                (f.x as f64 - cx).abs().max((f.y as f64 - cy).abs()) <= radius as f64
            });
            match near {
                Some(c) => {
                    c.sx += f.x as f64;
                    c.sy += f.y as f64;
                    c.members.push((si, f));
                }
                None => clusters.push(Cluster {
                    sx: f.x as f64,
                    sy: f.y as f64,
                    members: vec![(si, f)],
                }),
            }
        }
    }

    Ok(clusters
        .iter()
        .filter_map(|c| {
            let (cx, cy) = c.centroid();
            let (x, y) = (cx.round() as i64, cy.round() as i64);
            let support: BTreeSet<&str> = c
                .members
                .iter()
                .filter(|(_, f)| (f.x - x).abs().max((f.y - y).abs()) <= radius)
                .map(|(si, _)| sequences[*si].subject.as_str())
                .collect();
            (support.len() >= min_subjects).then(|| Fixation::at(x, y))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{write_png, RgbImage};

    fn trial() -> Trial {
        Trial {
            id: "t".into(),
            task: TaskType::Array,
            target_img: "target.png".into(),
            search_img: "search.png".into(),
            target_box: Rect::new(80, 80, 20, 20),
            candidates: vec![
                Candidate {
                    id: "a".into(),
                    rect: Rect::new(10, 10, 20, 20),
                },
                Candidate {
                    id: "b".into(),
                    rect: Rect::new(80, 80, 20, 20),
                },
            ],
            imagenet_class: None,
            width: 128,
            height: 128,
        }
    }

    fn seq(points: &[(i64, i64)]) -> FixationSequence {
        FixationSequence {
            subject: "s".into(),
            trial: "t".into(),
            points: points.iter().map(|&(x, y)| Fixation::at(x, y)).collect(),
        }
    }

    #[test]
    fn error_fixation_rules() {
        let t = trial();
        let (d1, d2, tg) = ((15, 15), (50, 50), (85, 85));
        assert_eq!(filter_error_fixations(&seq(&[d1, d2, tg]), &t, false, 0).len(), 2);
        assert!(filter_error_fixations(&seq(&[tg]), &t, false, 0).is_empty());
        let out = filter_error_fixations(&seq(&[d1, tg, d2]), &t, false, 0);
        assert_eq!(out, vec![Fixation::at(15, 15)]);
        let out = filter_error_fixations(&seq(&[(64, 64), d1, tg]), &t, true, 0);
        assert_eq!(out, vec![Fixation::at(15, 15)]);
        // margin catches a near miss on the box edge
        assert!(filter_error_fixations(&seq(&[(78, 85)]), &t, false, 3).is_empty());
    }

    fn subject(name: &str, points: &[(i64, i64)]) -> FixationSequence {
        FixationSequence {
            subject: name.into(),
            ..seq(points)
        }
    }

    #[test]
    fn common_fixation_cases() {
        let two = [subject("a", &[(20, 20)]), subject("b", &[(24, 18)])];
        assert_eq!(common_fixations(&two, 8, 2).unwrap(), vec![Fixation::at(22, 19)]);

        let apart = [subject("a", &[(20, 20)]), subject("b", &[(100, 100)])];
        assert!(common_fixations(&apart, 8, 2).unwrap().is_empty());

        let three = [
            subject("a", &[(50, 50), (10, 100)]),
            subject("b", &[(52, 49), (100, 10)]),
            subject("c", &[(48, 51), (110, 110)]),
        ];
        assert_eq!(common_fixations(&three, 6, 2).unwrap(), vec![Fixation::at(50, 50)]);
        assert!(common_fixations(&three[..1], 6, 2).is_err());
    }

    #[test]
    fn trial_invariants() {
        let mut t = trial();
        assert!(t.check().is_ok());
        t.target_box = Rect::new(81, 80, 20, 20);
        assert!(t.check().is_err());
        let mut t = trial();
        t.candidates[1].id = "a".into();
        assert!(t.check().is_err());
    }

    fn write_fixture(dir: &Path) -> PathBuf {
        let img = RgbImage::filled(128, 128, [0.5; 3]);
        write_png(&img, &dir.join("search.png")).unwrap();
        write_png(&RgbImage::filled(32, 32, [0.1; 3]), &dir.join("target.png")).unwrap();
        let mut t2 = trial();
        t2.id = "t2".into();
        t2.imagenet_class = Some(281);
        let f = FixationSequence {
            points: vec![
                Fixation {
                    x: 15,
                    y: 15,
                    duration_ms: Some(210.0),
                },
                Fixation {
                    x: 85,
                    y: 85,
                    duration_ms: Some(180.0),
                },
            ],
            ..seq(&[])
        };
        let p = dir.join("manifest.jsonl");
        write_manifest(&p, &[trial(), t2], &[f]).unwrap();
        p
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(dir.path());
        let ds = load_manifest(&p).unwrap();
        assert_eq!(ds.trials.len(), 2);
        assert_eq!(ds.trials[0], trial());
        assert_eq!(ds.trials[1].imagenet_class, Some(281));
        let q = dir.path().join("again.jsonl");
        write_manifest(&q, &ds.trials, &ds.fixations).unwrap();
        let again = load_manifest(&q).unwrap();
        assert_eq!(again.trials, ds.trials);
        assert_eq!(again.fixations, ds.fixations);
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }

    #[test]
    fn manifest_rejects_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_fixture(dir.path());
        let mut text = std::fs::read_to_string(&p).unwrap();
        text.push_str("{\"kind\":\"fixations\",\"trial\":\"t\",\"subject\":\"s2\",\"points\":[[-1,5]]}\n");
        std::fs::write(&p, &text).unwrap();
        match load_manifest(&p).unwrap_err() {
            Error::Manifest { line, reason, .. } => {
                assert_eq!(line, 4);
                assert!(reason.contains("(-1, 5)"), "{reason}");
            }
            e => panic!("unexpected {e}"),
        }

        std::fs::write(&p, "{\"kind\":\"trial\",\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { line: 1, .. })));

        let mut text = encode_manifest(&[trial()], &[]).unwrap();
        text = text.replace("search.png", "missing.png");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { line: 1, .. })));
    }
}
