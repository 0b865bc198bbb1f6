//! Seeded family-tree benchmark with two-hop questions and optional
//! deletion of the edges the gold paths run through.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{format_qa_line, EvalError};
use crate::graph::{EntityId, GraphBuilder, KnowledgeGraph, RelationId, Triple};
use crate::mining::QaExample;

pub const HAS_BROTHER: &str = "hasBrother";
pub const HAS_CHILD: &str = "hasChild";
pub const IS_MARRIED_TO: &str = "isMarriedTo";
pub const HAS_SPOUSE: &str = "hasSpouse";
pub const HAS_FATHER: &str = "hasFather";

/// Relation order fixes the relation ids of generated graphs.
pub const RELATIONS: [&str; 5] = [HAS_BROTHER, HAS_CHILD, IS_MARRIED_TO, HAS_SPOUSE, HAS_FATHER];

/// Question pattern (topic spliced between prefix and suffix) and gold rule.
pub const TEMPLATES: [(&str, &str, [&str; 2]); 4] = [
    ("Who is the child of ", "'s brother?", [HAS_BROTHER, HAS_CHILD]),
    ("Who is the father of ", "'s spouse?", [IS_MARRIED_TO, HAS_FATHER]),
    ("Who is the brother of ", "'s father?", [HAS_FATHER, HAS_BROTHER]),
    ("Who is the spouse of ", "'s brother?", [HAS_BROTHER, IS_MARRIED_TO]),
];

const MALE_NAMES: [&str; 12] = [
    "Tom", "Bob", "Jim", "Max", "Sam", "Leo", "Ian", "Joe", "Ned", "Abe", "Gus", "Hal",
];
const FEMALE_NAMES: [&str; 12] = [
    "Ann", "Sue", "Liz", "Kim", "Amy", "Eve", "Ada", "Ivy", "Mia", "Zoe", "Fay", "Joy",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilyConfig {
    /// Founding couples; each yields two more generations.
    pub families: usize,
    pub train_questions: usize,
    pub test_questions: usize,
    /// Share of gold-path edges (over both splits) removed from the graph.
    pub delete_fraction: f64,
    pub seed: u64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            families: 90,
            train_questions: 200,
            test_questions: 200,
            delete_fraction: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchQuestion {
    pub question: String,
    pub topic: String,
    /// Answers on the complete graph, sorted.
    pub answers: Vec<String>,
    pub gold_rule: Vec<String>,
    /// The gold rule no longer reaches any answer on the returned graph.
    pub broken: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FamilyBenchmark {
    /// Triples after deletion, grouped by relation in `RELATIONS` order.
    pub triples: Vec<(String, String, String)>,
    pub deleted: Vec<(String, String, String)>,
    pub train: Vec<BenchQuestion>,
    pub test: Vec<BenchQuestion>,
}

struct Person {
    name: String,
    male: bool,
    family: usize,
    father: Option<usize>,
    spouse: Option<usize>,
    children: Vec<usize>,
}

struct People {
    all: Vec<Person>,
    counter: BTreeMap<&'static str, usize>,
}

impl People {
    fn add<R: Rng>(&mut self, rng: &mut R, male: bool, family: usize, father: Option<usize>, mother: Option<usize>) -> usize {
        let names = if male { &MALE_NAMES } else { &FEMALE_NAMES };
        let base = names[rng.random_range(0..names.len())];
        let n = self.counter.entry(base).or_insert(0);
        *n += 1;
        let id = self.all.len();
        self.all.push(Person {
            name: format!("{base}_{n}"),
            male,
            family,
            father,
            spouse: None,
            children: Vec::new(),
        });
        for parent in [father, mother].into_iter().flatten() {
            self.all[parent].children.push(id);
        }
        id
    }

    fn marry(&mut self, husband: usize, wife: usize) {
        self.all[husband].spouse = Some(wife);
        self.all[wife].spouse = Some(husband);
    }

    fn children<R: Rng>(&mut self, rng: &mut R, father: usize, mother: usize, count: usize) -> Vec<usize> {
        let family = self.all[father].family;
        (0..count)
            .map(|_| {
                let male = rng.random_bool(0.5);
                self.add(rng, male, family, Some(father), Some(mother))
            })
            .collect()
    }
}

fn grow(config: &FamilyConfig, rng: &mut ChaCha8Rng) -> People {
    let mut people = People {
        all: Vec::new(),
        counter: BTreeMap::new(),
    };
    let mut second_gen = Vec::new();
    for family in 0..config.families {
        let father = people.add(rng, true, family, None, None);
        let mother = people.add(rng, false, family, None, None);
        people.marry(father, mother);
        let n = rng.random_range(2..=4);
        second_gen.extend(people.children(rng, father, mother, n));
    }
    let mut men: Vec<usize> = second_gen.iter().copied().filter(|&p| people.all[p].male).collect();
    let mut women: Vec<usize> = second_gen.iter().copied().filter(|&p| !people.all[p].male).collect();
    men.shuffle(rng);
    women.shuffle(rng);
    for man in men {
        if !rng.random_bool(0.85) {
            continue;
        }
        let family = people.all[man].family;
        let Some(pos) = women.iter().position(|&w| people.all[w].family != family) else {
            continue;
        };
        let wife = women.remove(pos);
        people.marry(man, wife);
        let n = rng.random_range(1..=3);
        people.children(rng, man, wife, n);
    }
    people
}

fn family_triples(people: &People) -> Vec<(usize, &'static str, usize)> {
    let mut by_relation: BTreeMap<usize, Vec<(usize, &'static str, usize)>> = BTreeMap::new();
    let mut push = |rel: &'static str, h: usize, t: usize| {
        let order = RELATIONS.iter().position(|r| *r == rel).unwrap();
        by_relation.entry(order).or_default().push((h, rel, t));
    };
    for (id, p) in people.all.iter().enumerate() {
        if let Some(f) = p.father {
            for &sib in &people.all[f].children {
                if sib != id && people.all[sib].male {
                    push(HAS_BROTHER, id, sib);
                }
            }
        }
        for &c in &p.children {
            push(HAS_CHILD, id, c);
        }
        if let (true, Some(s)) = (p.male, p.spouse) {
            push(IS_MARRIED_TO, id, s);
        }
        if let (false, Some(s)) = (p.male, p.spouse) {
            push(HAS_SPOUSE, id, s);
        }
        if let Some(f) = p.father {
            push(HAS_FATHER, id, f);
        }
    }
    by_relation.into_values().flatten().collect()
}

fn build_graph(people: &People, triples: &[(usize, &'static str, usize)]) -> KnowledgeGraph {
    let mut b = GraphBuilder::new();
    for r in RELATIONS {
        b.relation(r);
    }
    for &(h, r, t) in triples {
        b.add(&people.all[h].name, r, &people.all[t].name);
    }
    b.build()
}

/// Every path from `topic` along `rule`, as lists of triples.
fn gold_paths(graph: &KnowledgeGraph, topic: EntityId, rule: &[RelationId]) -> Vec<Vec<Triple>> {
    let mut paths: Vec<(EntityId, Vec<Triple>)> = vec![(topic, Vec::new())];
    for &r in rule {
        let mut next = Vec::new();
        for (at, path) in &paths {
            for &t in graph.neighbors(*at, r).unwrap_or(&[]) {
                let mut p = path.clone();
                p.push(Triple::new(*at, r, t));
                next.push((t, p));
            }
        }
        paths = next;
    }
    paths.into_iter().map(|(_, p)| p).collect()
}

fn traverse(graph: &KnowledgeGraph, topic: EntityId, rule: &[RelationId]) -> BTreeSet<EntityId> {
    let mut frontier = BTreeSet::from([topic]);
    for &r in rule {
        frontier = frontier
            .iter()
            .flat_map(|&e| graph.neighbors(e, r).unwrap_or(&[]).iter().copied())
            .collect();
    }
    frontier
}

pub fn generate(config: &FamilyConfig) -> Result<FamilyBenchmark, EvalError> {
    if !(0.0..=1.0).contains(&config.delete_fraction) {
        return Err(EvalError::InvalidConfig("delete fraction must lie in [0, 1]".into()));
    }
    if config.families == 0 {
        return Err(EvalError::InvalidConfig("need at least one family".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let people = grow(config, &mut rng);
    let triples = family_triples(&people);
    let complete = build_graph(&people, &triples);
    let rule_ids = |t: usize| -> Vec<RelationId> {
        TEMPLATES[t].2.iter().map(|r| complete.relation_id(r).unwrap()).collect()
    };

    let mut eligible = Vec::new();
    for t in 0..TEMPLATES.len() {
        let rule = rule_ids(t);
        for (id, p) in people.all.iter().enumerate() {
            let e = complete.entity_id(&p.name).unwrap();
            if !traverse(&complete, e, &rule).is_empty() {
                eligible.push((t, id));
            }
        }
    }
    let wanted = config.train_questions + config.test_questions;
    if eligible.len() < wanted {
        return Err(EvalError::InvalidConfig(format!(
            "only {} distinct questions available for {wanted} requested; add families",
            eligible.len()
        )));
    }
    eligible.shuffle(&mut rng);
    eligible.truncate(wanted);

    let mut on_gold_paths = BTreeSet::new();
    for &(t, id) in &eligible {
        let e = complete.entity_id(&people.all[id].name).unwrap();
        on_gold_paths.extend(gold_paths(&complete, e, &rule_ids(t)).into_iter().flatten());
    }
    let on_gold_paths: Vec<Triple> = on_gold_paths.into_iter().collect();
    let n_delete = (on_gold_paths.len() as f64 * config.delete_fraction).round() as usize;
    let deleted: BTreeSet<Triple> = index::sample(&mut rng, on_gold_paths.len(), n_delete)
        .into_iter()
        .map(|i| on_gold_paths[i])
        .collect();

    let name = |e: EntityId| complete.entity_name(e).to_owned();
    let rel = |r: RelationId| complete.relation_name(r).to_owned();
    let kept: Vec<(usize, &'static str, usize)> = triples
        .iter()
        .copied()
        .filter(|&(h, r, t)| {
            let id = |i: usize| complete.entity_id(&people.all[i].name).unwrap();
            !deleted.contains(&Triple::new(id(h), complete.relation_id(r).unwrap(), id(t)))
        })
        .collect();
    let incomplete = build_graph(&people, &kept);

    let questions: Vec<BenchQuestion> = eligible
        .iter()
        .map(|&(t, id)| {
            let topic = people.all[id].name.clone();
            let e = complete.entity_id(&topic).unwrap();
            let rule = rule_ids(t);
            let answers = traverse(&complete, e, &rule);
            // Relation ids agree between the two graphs; entity ids may not.
            let reached: BTreeSet<String> = incomplete
                .entity_id(&topic)
                .map(|e2| traverse(&incomplete, e2, &rule))
                .unwrap_or_default()
                .into_iter()
                .map(|a| incomplete.entity_name(a).to_owned())
                .collect();
            let answers: Vec<String> = answers.into_iter().map(name).collect();
            let broken = !answers.iter().any(|a| reached.contains(a));
            BenchQuestion {
                question: format!("{}{topic}{}", TEMPLATES[t].0, TEMPLATES[t].1),
                topic,
                answers,
                gold_rule: rule.into_iter().map(rel).collect(),
                broken,
            }
        })
        .collect();
    let (train, test) = questions.split_at(config.train_questions);

    let surface = |&(h, r, t): &(usize, &'static str, usize)| (people.all[h].name.clone(), r.to_owned(), people.all[t].name.clone());
    Ok(FamilyBenchmark {
        triples: kept.iter().map(surface).collect(),
        deleted: deleted
            .iter()
            .map(|t| (name(t.head), rel(t.relation), name(t.tail)))
            .collect(),
        train: train.to_vec(),
        test: test.to_vec(),
    })
}

impl FamilyBenchmark {
    pub fn graph(&self) -> KnowledgeGraph {
        let mut b = GraphBuilder::new();
        for r in RELATIONS {
            b.relation(r);
        }
        for (h, r, t) in &self.triples {
            b.add(h, r, t);
        }
        b.build()
    }

    pub fn write_triples<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (h, r, t) in &self.triples {
            writeln!(out, "{h}\t{r}\t{t}")?;
        }
        out.flush()
    }

    pub fn write_qa<W: Write>(questions: &[BenchQuestion], mut out: W) -> Result<(), EvalError> {
        for q in questions {
            let answers: Vec<&str> = q.answers.iter().map(String::as_str).collect();
            writeln!(out, "{}", format_qa_line(&q.question, &q.topic, &answers)?)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Resolves questions against `graph`; answers the graph lacks are
    /// dropped, as are questions whose topic it lacks.
    pub fn examples(questions: &[BenchQuestion], graph: &KnowledgeGraph) -> Vec<QaExample> {
        questions
            .iter()
            .filter_map(|q| {
                let topic = graph.entity_id(&q.topic)?;
                let answers: Vec<EntityId> = q.answers.iter().filter_map(|a| graph.entity_id(a)).collect();
                (!answers.is_empty()).then(|| QaExample::new(q.question.clone(), topic, q.topic.clone(), answers))
            })
            .collect()
    }
}
