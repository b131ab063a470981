//! World and dataset generation.
//!
//! Everything is deterministic under the caller's seed. Rejection loops carry
//! an explicit budget of 100x the requested count; exhausting it is an error
//! rather than a hang.
//!
//! Training queries never co-mention a held-out (shape, color) pair, within
//! or across descriptors. Each held-out pair (w1 = shape, w2 = color) yields
//! test triplets built from phrases seen in training:
//!
//! - ww: the single descriptor (w2 w1),
//! - pw: [p1, bare w2] with w1 a proper part of p1,
//! - pp: [p1, p2] with p2 = (w2, n2) and n2 a shape other than w1,
//!
//! with every item pair in a test query other than (w1, w2) checked to
//! co-occur somewhere in training, so the intended novel composition is the
//! only novel composition.

use super::{
    oracle_answer, Datasets, Descriptor, GenCounts, ItemKind, Level, Sample, Scene, SceneObject,
    SynthError, Triplet, Vocabulary, World, WorldConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

type Result<T> = std::result::Result<T, SynthError>;

/// All unordered item-id pairs co-mentioned by a query, within and across
/// descriptors, deduplicated and sorted.
pub fn collect_query_pairs(query: &[Descriptor]) -> Vec<(usize, usize)> {
    let items: Vec<usize> = query.iter().flat_map(|d| d.items()).collect();
    let mut pairs = Vec::new();
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            if items[i] != items[j] {
                let (a, b) = (items[i].min(items[j]), items[i].max(items[j]));
                pairs.push((a, b));
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

/// Every unordered item pair that co-occurs in some training query.
pub fn training_cooccurrences(train: &[Sample]) -> HashSet<(usize, usize)> {
    let mut set = HashSet::new();
    for s in train {
        set.extend(collect_query_pairs(&s.query));
    }
    set
}

/// Picks the held-out (shape, color) pairs. Every shape keeps at least one
/// allowed color and every color at least one allowed shape, so each item
/// still appears in training-eligible compositions.
pub fn generate_world(config: WorldConfig, seed: u64) -> Result<World> {
    let vocab = Vocabulary::with_counts(config.n_sizes, config.n_colors, config.n_shapes);
    let max = config.n_shapes * config.n_colors - config.n_shapes.max(config.n_colors);
    if config.blacklist_size > max {
        return Err(SynthError::InfeasibleBlacklist { requested: config.blacklist_size, max });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all_pairs: Vec<(usize, usize)> = (0..config.n_shapes)
        .flat_map(|sh| (0..config.n_colors).map(move |c| (sh, c)))
        .collect();

    for _ in 0..100 {
        all_pairs.shuffle(&mut rng);
        let mut per_shape = vec![0usize; config.n_shapes];
        let mut per_color = vec![0usize; config.n_colors];
        let mut chosen = Vec::with_capacity(config.blacklist_size);
        for &(sh, c) in &all_pairs {
            if chosen.len() == config.blacklist_size {
                break;
            }
            if per_shape[sh] + 1 < config.n_colors && per_color[c] + 1 < config.n_shapes {
                per_shape[sh] += 1;
                per_color[c] += 1;
                chosen.push((vocab.shape_id(sh), vocab.color_id(c)));
            }
        }
        if chosen.len() == config.blacklist_size {
            chosen.sort_unstable();
            return Ok(World { config, vocab, blacklist: chosen });
        }
    }
    Err(SynthError::InfeasibleBlacklist { requested: config.blacklist_size, max })
}

struct Gen<'a> {
    world: &'a World,
    rng: ChaCha8Rng,
    /// Held-out pairs as sorted item-id tuples for O(1) lookup.
    banned: HashSet<(usize, usize)>,
}

impl<'a> Gen<'a> {
    fn new(world: &'a World, seed: u64) -> Gen<'a> {
        let banned = world
            .blacklist
            .iter()
            .map(|&(sh, c)| (sh.min(c), sh.max(c)))
            .collect();
        Gen { world, rng: ChaCha8Rng::seed_from_u64(seed), banned }
    }

    fn random_descriptor(&mut self) -> Descriptor {
        let v = &self.world.vocab;
        let len = self.rng.gen_range(1..=3usize);
        let kinds: Vec<ItemKind> = match len {
            1 => vec![[ItemKind::Size, ItemKind::Color, ItemKind::Shape][self.rng.gen_range(0..3)]],
            2 => {
                let combos = [
                    [ItemKind::Size, ItemKind::Color],
                    [ItemKind::Size, ItemKind::Shape],
                    [ItemKind::Color, ItemKind::Shape],
                ];
                combos[self.rng.gen_range(0..3)].to_vec()
            }
            _ => vec![ItemKind::Size, ItemKind::Color, ItemKind::Shape],
        };
        let mut d = Descriptor::default();
        for kind in kinds {
            match kind {
                ItemKind::Size => d.size = Some(v.size_id(self.rng.gen_range(0..v.n_sizes()))),
                ItemKind::Color => d.color = Some(v.color_id(self.rng.gen_range(0..v.n_colors()))),
                ItemKind::Shape => d.shape = Some(v.shape_id(self.rng.gen_range(0..v.n_shapes()))),
            }
        }
        d
    }

    fn random_query(&mut self) -> Vec<Descriptor> {
        let n = self.rng.gen_range(1..=2usize);
        (0..n).map(|_| self.random_descriptor()).collect()
    }

    fn mentions_banned_pair(&self, query: &[Descriptor]) -> bool {
        collect_query_pairs(query).iter().any(|p| self.banned.contains(p))
    }

    fn random_object(&mut self) -> SceneObject {
        let v = &self.world.vocab;
        SceneObject {
            size: v.size_id(self.rng.gen_range(0..v.n_sizes())),
            color: v.color_id(self.rng.gen_range(0..v.n_colors())),
            shape: v.shape_id(self.rng.gen_range(0..v.n_shapes())),
        }
    }

    fn random_scene(&mut self) -> Scene {
        let n = self
            .rng
            .gen_range(self.world.config.min_objects..=self.world.config.max_objects);
        (0..n).map(|_| self.random_object()).collect()
    }

    /// A scene realizing the requested answer for `query`, or `None` if the
    /// per-sample try limit runs out.
    fn scene_for(&mut self, query: &[Descriptor], want: bool) -> Option<Scene> {
        for _ in 0..40 {
            let mut scene = self.random_scene();
            if want {
                // plant a matching object per descriptor, then verify
                for d in query {
                    let i = self.rng.gen_range(0..scene.len());
                    let obj = &mut scene[i];
                    if let Some(s) = d.size {
                        obj.size = s;
                    }
                    if let Some(c) = d.color {
                        obj.color = c;
                    }
                    if let Some(s) = d.shape {
                        obj.shape = s;
                    }
                }
            }
            if oracle_answer(&scene, query) == want {
                return Some(scene);
            }
        }
        None
    }
}

fn make_sample(
    id: String,
    level: Level,
    triplet_id: Option<String>,
    query: Vec<Descriptor>,
    scene: Scene,
    answer: bool,
    novel: Option<(usize, usize)>,
) -> Sample {
    let phrase_lengths = query.iter().map(Descriptor::len).collect();
    debug_assert_eq!(oracle_answer(&scene, &query), answer);
    Sample {
        id,
        level,
        triplet_id,
        query,
        phrase_lengths,
        scene,
        answer,
        novel_composition: novel,
        extra: Default::default(),
    }
}

/// Generates the training split, an IID held-out split, and the triplet test
/// set. Answers alternate per split (and per level, for triplets), so each is
/// balanced up to rounding.
pub fn generate_datasets(world: &World, counts: GenCounts, seed: u64) -> Result<Datasets> {
    let mut g = Gen::new(world, seed);

    // training split
    let mut train = Vec::with_capacity(counts.train);
    let budget = counts.train.saturating_mul(100).max(100);
    let mut attempts = 0;
    while train.len() < counts.train {
        attempts += 1;
        if attempts > budget {
            return Err(SynthError::BudgetExhausted { building: "training samples", budget });
        }
        let query = g.random_query();
        if g.mentions_banned_pair(&query) {
            continue;
        }
        let want = train.len() % 2 == 0;
        let Some(scene) = g.scene_for(&query, want) else {
            continue;
        };
        let id = format!("train-{:05}", train.len());
        train.push(make_sample(id, Level::Train, None, query, scene, want, None));
    }

    let seen = training_cooccurrences(&train);
    let train_descriptors: Vec<Descriptor> = {
        let mut uniq = HashSet::new();
        train
            .iter()
            .flat_map(|s| s.query.iter().copied())
            .filter(|d| uniq.insert(*d))
            .collect()
    };

    // IID held-out split: same distribution, but only compositions already
    // co-occurring in training, so no sample is accidentally novel.
    let mut iid = Vec::with_capacity(counts.iid);
    let budget = counts.iid.saturating_mul(100).max(100);
    let mut attempts = 0;
    while iid.len() < counts.iid {
        attempts += 1;
        if attempts > budget {
            return Err(SynthError::BudgetExhausted { building: "iid samples", budget });
        }
        let query = g.random_query();
        if collect_query_pairs(&query).iter().any(|p| !seen.contains(p)) {
            continue;
        }
        let want = iid.len() % 2 == 0;
        let Some(scene) = g.scene_for(&query, want) else {
            continue;
        };
        let id = format!("iid-{:05}", iid.len());
        iid.push(make_sample(id, Level::Train, None, query, scene, want, None));
    }

    // test triplets, cycling through the held-out pairs
    let mut test = Vec::with_capacity(counts.triplets * 3);
    let mut triplets = Vec::with_capacity(counts.triplets);
    let mut level_flip = [0usize; 3];
    let budget = counts.triplets.saturating_mul(100).max(100);
    let mut attempts = 0;
    for t in 0..counts.triplets {
        let (w1, w2) = world.blacklist[t % world.blacklist.len()];
        let novel = Some((w1.min(w2), w1.max(w2)));

        let p1_candidates: Vec<Descriptor> = train_descriptors
            .iter()
            .copied()
            .filter(|d| d.shape == Some(w1) && d.len() >= 2)
            .collect();
        let p2_candidates: Vec<Descriptor> = train_descriptors
            .iter()
            .copied()
            .filter(|d| d.color == Some(w2) && d.size.is_none() && d.shape.is_some())
            .collect();

        let pair_ok = |p1: &Descriptor, p2: &Descriptor| {
            p1.items().all(|a| {
                p2.items().all(|b| {
                    let key = (a.min(b), a.max(b));
                    key == novel.unwrap() || a == b || seen.contains(&key)
                })
            })
        };

        let mut found = None;
        for _ in 0..200 {
            attempts += 1;
            if attempts > budget {
                return Err(SynthError::BudgetExhausted { building: "test triplets", budget });
            }
            if p1_candidates.is_empty() || p2_candidates.is_empty() {
                break;
            }
            let p1 = p1_candidates[g.rng.gen_range(0..p1_candidates.len())];
            let p2 = p2_candidates[g.rng.gen_range(0..p2_candidates.len())];
            if pair_ok(&p1, &p2) {
                found = Some((p1, p2));
                break;
            }
        }
        if found.is_none() {
            // deterministic exhaustive fallback
            'scan: for p1 in &p1_candidates {
                for p2 in &p2_candidates {
                    if pair_ok(p1, p2) {
                        found = Some((*p1, *p2));
                        break 'scan;
                    }
                }
            }
        }
        let Some((p1, p2)) = found else {
            return Err(SynthError::BudgetExhausted { building: "test triplets", budget });
        };

        let triplet_id = format!("t{t:04}");
        let queries = [
            (Level::Pp, vec![p1, p2]),
            (Level::Pw, vec![p1, Descriptor { color: Some(w2), ..Default::default() }]),
            (
                Level::Ww,
                vec![Descriptor { color: Some(w2), shape: Some(w1), ..Default::default() }],
            ),
        ];
        let mut member_ids = Vec::with_capacity(3);
        for (li, (level, query)) in queries.into_iter().enumerate() {
            let want = level_flip[li] % 2 == 0;
            level_flip[li] += 1;
            let scene = loop {
                attempts += 1;
                if attempts > budget {
                    return Err(SynthError::BudgetExhausted { building: "test triplets", budget });
                }
                if let Some(s) = g.scene_for(&query, want) {
                    break s;
                }
            };
            let id = format!("{triplet_id}-{level}");
            member_ids.push(id.clone());
            test.push(make_sample(id, level, Some(triplet_id.clone()), query, scene, want, novel));
        }
        triplets.push(Triplet {
            triplet_id,
            w1,
            w2,
            p1: p1.items().collect(),
            p2: p2.items().collect(),
            pp_id: member_ids[0].clone(),
            pw_id: member_ids[1].clone(),
            ww_id: member_ids[2].clone(),
        });
    }

    Ok(Datasets { train, iid, test, triplets })
}
