//! Region scoring, image ranking and per-cycle region selection.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data_model::{RegionGrid, RegionRef, RegionState};
use crate::error::{Error, Result};
use crate::seed;
use crate::uncertainty::EntropyMap;

/// How pixel entropies inside a region become one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    #[default]
    Max,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heuristic {
    Random,
    #[default]
    Entropy,
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Heuristic::Random => "random",
            Heuristic::Entropy => "entropy",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub region: RegionRef,
    pub score: f64,
    pub aggregation: Aggregation,
}

/// Scores of one image's unlabeled regions.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores {
    pub image_id: String,
    pub regions: Vec<RegionScore>,
}

impl ImageScores {
    pub fn max_score(&self) -> Option<f64> {
        self.regions.iter().map(|r| r.score).reduce(f64::max)
    }
}

/// Score every `Unlabeled` region of one image; labeled regions are skipped.
pub fn score_regions(
    entropy: &EntropyMap,
    grid: &RegionGrid,
    states: &[RegionState],
    aggregation: Aggregation,
) -> Result<Vec<RegionScore>> {
    if entropy.shape() != (grid.image_height, grid.image_width) {
        return Err(Error::invalid(format!(
            "entropy map {:?} does not match grid over {}x{}",
            entropy.shape(),
            grid.image_height,
            grid.image_width
        )));
    }
    if states.len() != grid.len() {
        return Err(Error::invalid(format!(
            "{} region states for a {}-region grid",
            states.len(),
            grid.len()
        )));
    }
    let mut out = Vec::new();
    for (idx, rect) in grid.regions() {
        if states[idx] != RegionState::Unlabeled {
            continue;
        }
        let vals = rect.pixels().map(|(r, c)| entropy.values.get(r, c));
        let score = match aggregation {
            Aggregation::Max => vals.fold(0.0, f64::max),
            Aggregation::Mean => vals.sum::<f64>() / rect.area() as f64,
        };
        out.push(RegionScore {
            region: RegionRef::unlabeled(entropy.image_id.clone(), idx),
            score,
            aggregation,
        });
    }
    Ok(out)
}

/// Images with at least one scored region, by descending best score then ascending id.
pub fn rank_images(scores: &[ImageScores]) -> Vec<String> {
    let mut ranked: Vec<(&str, f64)> = scores
        .iter()
        .filter_map(|s| s.max_score().map(|m| (s.image_id.as_str(), m)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().map(|(id, _)| id.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRequest {
    pub heuristic: Heuristic,
    pub images_per_cycle: usize,
    pub regions_per_image: usize,
    pub seed: u64,
}

impl SelectionRequest {
    pub fn new(heuristic: Heuristic, seed: u64) -> Self {
        Self {
            heuristic,
            images_per_cycle: 5,
            regions_per_image: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.images_per_cycle == 0 || self.regions_per_image == 0 {
            return Err(Error::invalid("selection counts must be >= 1"));
        }
        Ok(())
    }
}

/// Region states of one candidate image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolImage {
    pub image_id: String,
    pub states: Vec<RegionState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub region: RegionRef,
    /// Acquisition score; `None` for random picks.
    pub score: Option<f64>,
}

/// Pick this cycle's regions. Returns fewer than requested when the pool
/// runs out of unlabeled regions.
///
/// `scores` must cover every pool image with unlabeled regions when the
/// heuristic is `Entropy`; it is ignored for `Random`.
pub fn select(req: &SelectionRequest, pool: &[PoolImage], scores: Option<&[ImageScores]>) -> Result<Vec<Selection>> {
    req.validate()?;
    match req.heuristic {
        Heuristic::Random => Ok(select_random(req, pool)),
        Heuristic::Entropy => {
            let scores = scores.ok_or_else(|| Error::invalid("entropy selection needs region scores"))?;
            let by_id: HashMap<&str, &ImageScores> = scores.iter().map(|s| (s.image_id.as_str(), s)).collect();
            for img in pool {
                if img.states.contains(&RegionState::Unlabeled) && !by_id.contains_key(img.image_id.as_str()) {
                    return Err(Error::invalid(format!("no entropy scores for image {}", img.image_id)));
                }
            }
            let states: HashMap<&str, &PoolImage> = pool.iter().map(|p| (p.image_id.as_str(), p)).collect();
            // drop stale scores for regions the pool no longer lists as unlabeled
            let live: Vec<ImageScores> = scores
                .iter()
                .filter_map(|s| {
                    let p = states.get(s.image_id.as_str())?;
                    let regions: Vec<RegionScore> = s
                        .regions
                        .iter()
                        .filter(|r| p.states.get(r.region.region_index) == Some(&RegionState::Unlabeled))
                        .cloned()
                        .collect();
                    Some(ImageScores {
                        image_id: s.image_id.clone(),
                        regions,
                    })
                })
                .collect();
            let live_by_id: HashMap<&str, &ImageScores> = live.iter().map(|s| (s.image_id.as_str(), s)).collect();
            let mut out = Vec::new();
            for id in rank_images(&live).into_iter().take(req.images_per_cycle) {
                let mut regions: Vec<&RegionScore> = live_by_id[id.as_str()].regions.iter().collect();
                regions.sort_by(|a, b| {
                    b.score
                        .total_cmp(&a.score)
                        .then_with(|| a.region.region_index.cmp(&b.region.region_index))
                });
                out.extend(regions.into_iter().take(req.regions_per_image).map(|r| Selection {
                    region: r.region.clone(),
                    score: Some(r.score),
                }));
            }
            Ok(out)
        }
    }
}

fn select_random(req: &SelectionRequest, pool: &[PoolImage]) -> Vec<Selection> {
    let candidates: Vec<(&str, usize)> = pool
        .iter()
        .flat_map(|p| {
            p.states
                .iter()
                .enumerate()
                .filter(|(_, s)| **s == RegionState::Unlabeled)
                .map(move |(i, _)| (p.image_id.as_str(), i))
        })
        .collect();
    let want = (req.images_per_cycle * req.regions_per_image).min(candidates.len());
    let mut rng = seed::rng(req.seed, &[seed::tag("random-select")]);
    index::sample(&mut rng, candidates.len(), want)
        .into_iter()
        .map(|i| Selection {
            region: RegionRef::unlabeled(candidates[i].0, candidates[i].1),
            score: None,
        })
        .collect()
}

/// One line of the selection log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionLogEntry {
    pub cycle: usize,
    pub heuristic: Heuristic,
    pub image_id: String,
    pub region_index: usize,
    pub score: Option<f64>,
    pub aggregation: Aggregation,
    pub seed: u64,
}

pub fn write_selection_log<W: Write>(mut out: W, entries: &[SelectionLogEntry]) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n").map_err(|e| Error::io("<selection log>", e))?;
    }
    Ok(())
}

pub fn read_selection_log<R: BufRead>(input: R) -> Result<Vec<SelectionLogEntry>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<selection log>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{build_grid, Raster};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn emap(id: &str, h: usize, w: usize, v: Vec<f64>) -> EntropyMap {
        EntropyMap {
            image_id: id.into(),
            values: Raster::new(h, w, v).unwrap(),
        }
    }

    fn strip() -> (EntropyMap, RegionGrid) {
        (
            emap("a", 1, 4, vec![0.1, 0.2, 0.6, 0.3]),
            RegionGrid::with_shape(1, 4, 1, 2).unwrap(),
        )
    }

    fn unl(n: usize) -> Vec<RegionState> {
        vec![RegionState::Unlabeled; n]
    }

    #[test]
    fn constant_field_scores() {
        let e = emap("a", 4, 4, vec![0.3; 16]);
        let g = build_grid(4, 4, 4).unwrap();
        for agg in [Aggregation::Max, Aggregation::Mean] {
            let s = score_regions(&e, &g, &unl(4), agg).unwrap();
            assert_eq!(s.len(), 4);
            assert!(s.iter().all(|r| (r.score - 0.3).abs() < 1e-12));
        }
    }

    #[test]
    fn strip_scores_by_hand() {
        let (e, g) = strip();
        let max: Vec<f64> = score_regions(&e, &g, &unl(2), Aggregation::Max).unwrap().iter().map(|r| r.score).collect();
        assert_eq!(max, vec![0.2, 0.6]);
        let mean: Vec<f64> = score_regions(&e, &g, &unl(2), Aggregation::Mean).unwrap().iter().map(|r| r.score).collect();
        assert!((mean[0] - 0.15).abs() < 1e-12 && (mean[1] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn labeled_regions_are_not_scored() {
        let (e, g) = strip();
        let all = vec![RegionState::PointLabeled, RegionState::BackgroundTagged];
        assert!(score_regions(&e, &g, &all, Aggregation::Max).unwrap().is_empty());
        let one = vec![RegionState::PixelLabeled, RegionState::Unlabeled];
        let s = score_regions(&e, &g, &one, Aggregation::Max).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].region.region_index, 1);
    }

    #[test]
    fn dimension_mismatch_errors() {
        let (e, _) = strip();
        let g = RegionGrid::with_shape(2, 4, 1, 2).unwrap();
        assert!(score_regions(&e, &g, &unl(2), Aggregation::Max).is_err());
    }

    fn scores(id: &str, s: &[f64]) -> ImageScores {
        ImageScores {
            image_id: id.into(),
            regions: s
                .iter()
                .enumerate()
                .map(|(i, &v)| RegionScore {
                    region: RegionRef::unlabeled(id, i),
                    score: v,
                    aggregation: Aggregation::Max,
                })
                .collect(),
        }
    }

    #[test]
    fn ranking() {
        assert_eq!(rank_images(&[scores("A", &[0.5]), scores("B", &[0.7])]), vec!["B", "A"]);
        assert_eq!(rank_images(&[scores("b", &[0.4]), scores("a", &[0.4])]), vec!["a", "b"]);
        assert_eq!(rank_images(&[scores("z", &[0.1, 0.2])]), vec!["z"]);
        assert!(rank_images(&[scores("e", &[])]).is_empty());
    }

    fn pool(ids: &[&str], n: usize) -> Vec<PoolImage> {
        ids.iter()
            .map(|id| PoolImage {
                image_id: id.to_string(),
                states: unl(n),
            })
            .collect()
    }

    #[test]
    fn exhaustion_returns_what_is_left() {
        let p = pool(&["a", "b"], 4);
        let sc = [scores("a", &[0.1; 4]), scores("b", &[0.2; 4])];
        let req = SelectionRequest::new(Heuristic::Entropy, 0);
        assert_eq!(select(&req, &p, Some(&sc)).unwrap().len(), 2);
        let p = pool(&["a"], 3);
        let req = SelectionRequest::new(Heuristic::Random, 0);
        assert_eq!(select(&req, &p, None).unwrap().len(), 3);
        assert!(select(&req, &[], None).unwrap().is_empty());
    }

    #[test]
    fn entropy_picks_argmax_region() {
        let (e, g) = strip();
        let sc = ImageScores {
            image_id: "a".into(),
            regions: score_regions(&e, &g, &unl(2), Aggregation::Max).unwrap(),
        };
        let req = SelectionRequest { images_per_cycle: 1, ..SelectionRequest::new(Heuristic::Entropy, 0) };
        let s = select(&req, &pool(&["a"], 2), Some(&[sc])).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].region.region_index, 1);
        assert_eq!(s[0].score, Some(0.6));
    }

    #[test]
    fn entropy_requires_scores() {
        let req = SelectionRequest::new(Heuristic::Entropy, 0);
        assert!(select(&req, &pool(&["a"], 2), None).is_err());
        assert!(select(&req, &pool(&["a"], 2), Some(&[])).is_err());
    }

    #[test]
    fn region_ties_go_to_lowest_index() {
        let req = SelectionRequest::new(Heuristic::Entropy, 0);
        let s = select(&req, &pool(&["a"], 3), Some(&[scores("a", &[0.2, 0.5, 0.5])])).unwrap();
        assert_eq!(s[0].region.region_index, 1);
    }

    #[test]
    fn random_is_seeded() {
        let p = pool(&["a", "b", "c"], 16);
        let req = SelectionRequest::new(Heuristic::Random, 42);
        let a = select(&req, &p, None).unwrap();
        assert_eq!(a, select(&req, &p, None).unwrap());
        assert_eq!(a.len(), 5);
        let other = select(&SelectionRequest::new(Heuristic::Random, 43), &p, None).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn random_coverage_is_uniform() {
        // 3 images x 4 regions, one pick per seed; chi-square against uniform
        let mut p = pool(&["a", "b", "c"], 4);
        p[1].states[2] = RegionState::PointLabeled;
        let cells = 11;
        let n = 11_000;
        let mut counts: HashMap<(String, usize), usize> = HashMap::new();
        for s in 0..n {
            let req = SelectionRequest { images_per_cycle: 1, ..SelectionRequest::new(Heuristic::Random, s) };
            let sel = select(&req, &p, None).unwrap();
            assert_ne!((sel[0].region.image_id.as_str(), sel[0].region.region_index), ("b", 2));
            *counts.entry((sel[0].region.image_id.clone(), sel[0].region.region_index)).or_default() += 1;
        }
        assert_eq!(counts.len(), cells);
        let expect = n as f64 / cells as f64;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // 95th percentile of chi-square with 10 degrees of freedom
        assert!(chi2 < 18.307, "chi2 = {chi2}");
    }

    #[test]
    fn log_round_trip() {
        let entries = vec![
            SelectionLogEntry {
                cycle: 1,
                heuristic: Heuristic::Entropy,
                image_id: "x".into(),
                region_index: 3,
                score: Some(0.25),
                aggregation: Aggregation::Max,
                seed: 9,
            },
            SelectionLogEntry {
                cycle: 2,
                heuristic: Heuristic::Random,
                image_id: "y".into(),
                region_index: 0,
                score: None,
                aggregation: Aggregation::Max,
                seed: 9,
            },
        ];
        let mut buf = Vec::new();
        write_selection_log(&mut buf, &entries).unwrap();
        assert!(String::from_utf8_lossy(&buf).contains("\"heuristic\":\"entropy\""));
        assert_eq!(read_selection_log(&buf[..]).unwrap(), entries);
    }

    proptest! {
        #[test]
        fn selection_is_unlabeled_and_unique(
            states in prop::collection::vec(prop::collection::vec(0u8..3, 4), 1..6),
            vals in prop::collection::vec(0.0f64..0.7, 24),
            random in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let p: Vec<PoolImage> = states.iter().enumerate().map(|(i, s)| PoolImage {
                image_id: format!("img{i}"),
                states: s.iter().map(|&v| if v == 0 { RegionState::PointLabeled } else { RegionState::Unlabeled }).collect(),
            }).collect();
            let sc: Vec<ImageScores> = p.iter().enumerate().map(|(i, img)| ImageScores {
                image_id: img.image_id.clone(),
                regions: (0..4).filter(|&r| img.states[r] == RegionState::Unlabeled).map(|r| RegionScore {
                    region: RegionRef::unlabeled(img.image_id.clone(), r),
                    score: vals[i * 4 + r],
                    aggregation: Aggregation::Max,
                }).collect(),
            }).collect();
            let h = if random { Heuristic::Random } else { Heuristic::Entropy };
            let req = SelectionRequest { regions_per_image: 2, ..SelectionRequest::new(h, seed) };
            let sel = select(&req, &p, Some(&sc)).unwrap();
            let mut seen = HashSet::new();
            for s in &sel {
                let img = p.iter().find(|x| x.image_id == s.region.image_id).unwrap();
                prop_assert_eq!(img.states[s.region.region_index], RegionState::Unlabeled);
                prop_assert!(seen.insert((s.region.image_id.clone(), s.region.region_index)));
            }

            // strictly increasing transform leaves entropy picks unchanged
            if !random {
                let warped: Vec<ImageScores> = sc.iter().map(|s| ImageScores {
                    image_id: s.image_id.clone(),
                    regions: s.regions.iter().map(|r| RegionScore { score: (3.0 * r.score).exp() - 0.5, ..r.clone() }).collect(),
                }).collect();
                let again = select(&req, &p, Some(&warped)).unwrap();
                let a: Vec<_> = sel.iter().map(|s| s.region.clone()).collect();
                let b: Vec<_> = again.iter().map(|s| s.region.clone()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }
}
