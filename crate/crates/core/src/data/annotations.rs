//! Annotation generator: semantic, referring, multi-target, instruction,
//! zero-target and open-vocabulary queries over a generated scene.
//!
//! Spatial words follow a fixed observer standing at the midpoint of the
//! `y = 0` wall looking toward `+y`: left is `-x`, and the window wall is the
//! far wall `y = room_extent[1]`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::lexicon::{category_index, LEXICON};
use super::scene::{Scene, SceneObject};
use crate::tasks::{Annotation, TaskKind, Templates};

pub const VIEW_CONVENTION: &str =
    "observer at the midpoint of the y=0 wall looking toward +y; left is -x; the window wall is y=max";
/// Relative margin a relation's winner must hold over the runner-up.
const RELATION_MARGIN: f64 = 0.05;
const OPEN_VOCAB_SIZE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    ClosestToWindowWall,
    Left,
    Right,
    Largest,
    ClosestTo,
}

impl Relation {
    pub const ALL: [Relation; 5] = [
        Relation::ClosestToWindowWall,
        Relation::Left,
        Relation::Right,
        Relation::Largest,
        Relation::ClosestTo,
    ];
}

fn distance_2d(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Index of the smallest score when it beats every other by the margin.
fn unique_min(scores: &[f64]) -> Option<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (best, second) = (*order.first()?, *order.get(1)?);
    let gap = scores[second] - scores[best];
    (gap > RELATION_MARGIN * scores[second].abs().max(1.0)).then_some(best)
}

/// Resolve a relation among same-category candidates. Returns the winning
/// candidate and the description suffix, or `None` when ambiguous.
pub fn resolve_relation(
    scene: &Scene,
    candidates: &[&SceneObject],
    relation: Relation,
    anchor: Option<&SceneObject>,
) -> Option<(usize, String)> {
    let cat = &candidates.first()?.category;
    let ey = scene.room_extent[1];
    let (scores, text): (Vec<f64>, String) = match relation {
        Relation::ClosestToWindowWall => (
            candidates.iter().map(|o| ey - o.center[1]).collect(),
            format!("the {cat} closest to the window wall"),
        ),
        Relation::Left => (candidates.iter().map(|o| o.center[0]).collect(), format!("the {cat} on the left")),
        Relation::Right => (candidates.iter().map(|o| -o.center[0]).collect(), format!("the {cat} on the right")),
        Relation::Largest => (candidates.iter().map(|o| -o.volume()).collect(), format!("the largest {cat}")),
        Relation::ClosestTo => {
            let a = anchor?;
            (
                candidates.iter().map(|o| distance_2d(o.center, a.center)).collect(),
                format!("the {cat} closest to the {}", a.category),
            )
        }
    };
    unique_min(&scores).map(|i| (i, text))
}

fn by_category(scene: &Scene) -> BTreeMap<&str, Vec<&SceneObject>> {
    let mut map: BTreeMap<&str, Vec<&SceneObject>> = BTreeMap::new();
    for o in &scene.objects {
        map.entry(o.category.as_str()).or_default().push(o);
    }
    map
}

struct Builder<'a> {
    rng: ChaCha8Rng,
    scene: &'a Scene,
    out: Vec<Annotation>,
}

impl Builder<'_> {
    fn variant(&mut self, kind: TaskKind) -> usize {
        self.rng.random_range(0..Templates::builtin().variants(kind))
    }

    fn push(&mut self, kind: TaskKind, description: String, category: &str, targets: Vec<i32>) {
        let variant = self.variant(kind);
        let answer = if targets.is_empty() { vec![] } else { vec![category.to_string()] };
        self.out.push(Annotation {
            kind,
            description,
            category: category.to_string(),
            categories: vec![],
            answer_categories: answer,
            target_instance_ids: targets,
            variant,
        });
    }

    fn push_listing(&mut self, kind: TaskKind, offered: Vec<String>) {
        let mut answer = Vec::new();
        let mut targets = Vec::new();
        for name in &offered {
            let ids = instance_ids(self.scene, name);
            if !ids.is_empty() {
                answer.push(name.clone());
                targets.extend(ids);
            }
        }
        answer.sort();
        targets.sort_unstable();
        let variant = self.variant(kind);
        self.out.push(Annotation {
            kind,
            description: String::new(),
            category: String::new(),
            categories: offered,
            answer_categories: answer,
            target_instance_ids: targets,
            variant,
        });
    }
}

/// Instance ids of a category, the floor included.
fn instance_ids(scene: &Scene, category: &str) -> Vec<i32> {
    if category == LEXICON[0].name {
        return vec![0];
    }
    scene.instances_of(category).iter().map(|o| o.instance_id).collect()
}

pub fn generate_annotations(scene: &Scene, seed: u64) -> Vec<Annotation> {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a770),
        scene,
        out: Vec::new(),
    };
    let groups = by_category(scene);
    let mut present: Vec<&str> = vec![LEXICON[0].name];
    present.extend(groups.keys().copied());
    let mut absent: Vec<&str> = LEXICON
        .iter()
        .map(|c| c.name)
        .filter(|n| !present.contains(n))
        .collect();

    b.push_listing(TaskKind::SemanticAll, scene.categories.clone());

    let mut singles = present.clone();
    singles.shuffle(&mut b.rng);
    for cat in singles.into_iter().take(2) {
        let ids = instance_ids(scene, cat);
        b.push(TaskKind::SemanticSingle, String::new(), cat, ids);
    }

    // Referring: the lone instance of a category, or a relation among duplicates.
    let unique: Vec<&SceneObject> = groups.values().filter(|v| v.len() == 1).map(|v| v[0]).collect();
    let mut cats: Vec<&str> = groups.keys().copied().collect();
    cats.shuffle(&mut b.rng);
    let mut referring = 0;
    for cat in &cats {
        if referring == 3 {
            break;
        }
        let members = &groups[cat];
        if members.len() == 1 {
            b.push(TaskKind::Referring, format!("the {cat}"), cat, vec![members[0].instance_id]);
            referring += 1;
            continue;
        }
        let mut relations = Relation::ALL.to_vec();
        relations.shuffle(&mut b.rng);
        let anchors: Vec<&SceneObject> = unique.iter().copied().filter(|o| o.category != **cat).collect();
        let mut resolved = None;
        for rel in relations {
            let anchor = (!anchors.is_empty()).then(|| anchors[b.rng.random_range(0..anchors.len())]);
            if let Some(hit) = resolve_relation(scene, members, rel, anchor) {
                resolved = Some(hit);
                break;
            }
        }
        match resolved {
            Some((i, text)) => {
                b.push(TaskKind::Referring, text, cat, vec![members[i].instance_id]);
                referring += 1;
            }
            None => log::debug!("{}: no unambiguous relation for {cat}", scene.id),
        }
    }

    if let Some((cat, members)) = groups.iter().find(|(_, v)| v.len() > 1) {
        let plural = LEXICON[category_index(cat).unwrap_or(0)].plural;
        let ids = members.iter().map(|o| o.instance_id).collect();
        b.push(TaskKind::Referring, format!("all the {plural}"), cat, ids);
    }

    let mut instructed = 0;
    for cat in &cats {
        if instructed == 2 {
            break;
        }
        let riddle = LEXICON[category_index(cat).unwrap_or(0)].riddle;
        let members = &groups[cat];
        if members.len() == 1 {
            b.push(TaskKind::Instruction, riddle.to_string(), cat, vec![members[0].instance_id]);
            instructed += 1;
        } else if let Some((i, _)) = resolve_relation(scene, members, Relation::ClosestToWindowWall, None) {
            let text = format!("{riddle}, it is the one closest to the window wall");
            b.push(TaskKind::Instruction, text, cat, vec![members[i].instance_id]);
            instructed += 1;
        } else {
            log::debug!("{}: instruction for {cat} is ambiguous", scene.id);
        }
    }

    absent.shuffle(&mut b.rng);
    if let Some(cat) = absent.first() {
        b.push(TaskKind::Referring, format!("the {cat}"), cat, vec![]);
    }
    if let Some(cat) = absent.get(1) {
        let riddle = LEXICON[category_index(cat).unwrap_or(0)].riddle;
        b.push(TaskKind::Instruction, riddle.to_string(), cat, vec![]);
    }

    let mut offered: Vec<String> = Vec::new();
    let mut pool: Vec<&str> = present[1..].to_vec();
    pool.shuffle(&mut b.rng);
    offered.extend(pool.iter().take(3).map(|s| s.to_string()));
    offered.extend(absent.iter().skip(2).take(OPEN_VOCAB_SIZE - offered.len()).map(|s| s.to_string()));
    offered.sort();
    b.push_listing(TaskKind::OpenVocab, offered);

    b.out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{generate_scene, SceneSpec};

    #[test]
    fn every_kind_and_zero_target_appear() {
        let scene = generate_scene(&SceneSpec::new(5, 1024)).unwrap();
        let anns = generate_annotations(&scene, 5);
        for kind in TaskKind::ALL {
            assert!(anns.iter().any(|a| a.kind == kind), "{kind:?} missing");
        }
        assert!(anns.iter().filter(|a| a.is_zero_target()).count() >= 2);
        assert!((8..=14).contains(&anns.len()));
    }

    #[test]
    fn targets_are_labeled_points() {
        for seed in 0..10 {
            let scene = generate_scene(&SceneSpec::new(seed, 1024)).unwrap();
            for a in generate_annotations(&scene, seed) {
                for id in &a.target_instance_ids {
                    assert!(scene.point_count(*id) > 0, "{a:?}");
                }
                assert_eq!(a.is_zero_target(), a.answer_categories.is_empty());
            }
        }
    }

    #[test]
    fn deterministic() {
        let scene = generate_scene(&SceneSpec::new(9, 512)).unwrap();
        assert_eq!(generate_annotations(&scene, 9), generate_annotations(&scene, 9));
    }
}
