//! A small, fully synthetic demo corpus plus matching pipeline, task and
//! fairness configuration files.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Document, Split};
use crate::error::{Error, Result};

pub const DEMO_DOCUMENTS: usize = 50;
const DEMO_SEED: u64 = 20_240_611;

/// Diagnosis label and the sentence that documents it.
const DIAGNOSES: [(&str, &str); 8] = [
    ("sepsis", "Blood culture was positive and vancomycin and cefepime were started for sepsis."),
    ("pneumonia", "Chest x-ray showed a right lower lobe infiltrate consistent with pneumonia."),
    ("heart_failure", "Echocardiogram showed a reduced ejection fraction and furosemide was given for congestive heart failure."),
    ("kidney_injury", "Elevated creatinine was noted and acute kidney injury was managed with intravenous fluids."),
    ("atrial_fibrillation", "Electrocardiogram showed atrial fibrillation with rapid ventricular response and metoprolol was started."),
    ("gi_bleed", "Hemoglobin dropped overnight and a gastrointestinal bleed was treated with pantoprazole and blood transfusion."),
    ("copd", "Albuterol nebulizers and prednisone were given for a copd exacerbation."),
    ("diabetes", "Insulin was adjusted for poorly controlled diabetes mellitus."),
];

const COMPLAINTS: [&str; 8] = [
    "chest pain",
    "shortness of breath",
    "fever",
    "abdominal pain",
    "confusion",
    "weakness",
    "syncope",
    "cough",
];

const HISTORY: [&str; 8] = [
    "hypertension",
    "hyperlipidemia",
    "coronary artery disease",
    "chronic kidney disease",
    "asthma",
    "hypothyroidism",
    "osteoarthritis",
    "depression",
];

const COURSE: [&str; 10] = [
    "The patient remained stable overnight on the floor.",
    "Physical therapy was consulted for deconditioning.",
    "A complete blood count and basic metabolic panel were repeated in the morning.",
    "Pain was controlled with acetaminophen.",
    "Nausea improved with ondansetron.",
    "Oxygen saturation stayed above ninety two percent on two liters.",
    "Enoxaparin was given for deep vein thrombosis prophylaxis.",
    "The family was updated at the bedside.",
    "Home medications were resumed except for lisinopril.",
    "Urinalysis was unremarkable.",
];

const PLANS: [&str; 4] = [
    "Plan is discharge to home with follow up in two weeks.",
    "Plan is discharge to a rehabilitation facility once cleared by physical therapy.",
    "Plan is to continue current management and reassess tomorrow.",
    "Plan is outpatient follow up with primary care after discharge.",
];

fn demo_document(i: usize, rng: &mut ChaCha8Rng) -> Document {
    let female = i % 2 == 0;
    let over_50 = (i / 2) % 2 == 0;
    let white = (i / 4) % 2 == 0;
    let age = if over_50 { rng.random_range(51..=90) } else { rng.random_range(22..=49) };

    let mut labels: Vec<usize> = Vec::new();
    if i % 3 == 0 {
        labels.push(0);
    }
    let extra = rng.random_range(1..=2);
    while labels.len() < extra + usize::from(i % 3 == 0) {
        let d = rng.random_range(1..DIAGNOSES.len());
        if !labels.contains(&d) {
            labels.push(d);
        }
    }
    labels.sort_unstable();

    let complaint = COMPLAINTS.choose(rng).expect("non-empty");
    let mut history: Vec<&str> = HISTORY.choose_multiple(rng, 2).copied().collect();
    history.sort_unstable();
    let mut sentences = vec![
        format!(
            "The patient is a {age} year old {} admitted through the emergency department with {complaint}.",
            if female { "woman" } else { "man" }
        ),
        format!("Past medical history is notable for {} and {}.", history[0], history[1]),
        format!(
            "Heart rate was {} and blood pressure was {}/{} on admission.",
            rng.random_range(62..=128),
            rng.random_range(92..=168),
            rng.random_range(50..=96)
        ),
    ];
    let mut body: Vec<String> = labels.iter().map(|&d| DIAGNOSES[d].1.to_string()).collect();
    body.extend(COURSE.choose_multiple(rng, 3).map(|s| s.to_string()));
    body.shuffle(rng);
    sentences.extend(body);
    sentences.push(PLANS.choose(rng).expect("non-empty").to_string());

    let mut doc = Document::human(format!("demo-{:03}", i + 1), sentences.join(" "));
    doc.note_type = "discharge_summary".into();
    doc.split = match i {
        0..30 => Split::Train,
        30..35 => Split::Val,
        _ => Split::Test,
    };
    doc.labels = labels.iter().map(|&d| DIAGNOSES[d].0.to_string()).collect();
    doc.subgroups = BTreeMap::from([
        ("age_group".to_string(), if over_50 { "over_50" } else { "under_50" }.to_string()),
        ("gender".to_string(), if female { "female" } else { "male" }.to_string()),
        ("ethnicity".to_string(), if white { "white" } else { "non_white" }.to_string()),
    ]);
    doc
}

/// The 50-document demo corpus: 30 train, 5 val and 15 test notes with
/// diagnosis labels and three binary subgroup attributes.
pub fn demo_corpus() -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(DEMO_SEED);
    let docs = (0..DEMO_DOCUMENTS).map(|i| demo_document(i, &mut rng)).collect();
    Corpus::new(docs).expect("demo ids are unique")
}

pub const DEMO_PIPELINE: &str = r#"# Demo pipeline: mock backends only, runs offline.
seed = 7
input = "notes.jsonl"
output_dir = "out"
modes = ["by_note", "by_chunk"]
prompts = ["high_quality"]
rounds = 1
n_seeds = 3
settings = ["trtr", "tsts"]

[chunking]
target_words = 40

[generator]
kind = "mock_echo"

[judge]
kind = "mock_scripted"
scripted = { rule = "lexical" }

[[tasks]]
file = "tasks/diagnoses.toml"

[[tasks]]
file = "tasks/sepsis.toml"

[fairness]
specs_file = "fairness.toml"
"#;

pub const DEMO_MULTILABEL_TASK: &str = r#"name = "diagnoses"
kind = "multilabel"
label_field = "labels"
rare_threshold = 10
n_boot = 200
"#;

pub const DEMO_BINARY_TASK: &str = r#"name = "sepsis"
kind = "binary"
label_field = "labels"
positive_label = "sepsis"
n_boot = 200
"#;

pub const DEMO_FAIRNESS: &str = r#"[[specs]]
attribute = "age_group"
group_a = "over_50"
group_b = "under_50"

[[specs]]
attribute = "gender"
group_a = "female"
group_b = "male"

[[specs]]
attribute = "ethnicity"
group_a = "non_white"
group_b = "white"
"#;

/// Writes the demo corpus and its configuration files into `dir`.
pub fn write_demo(dir: &Path) -> Result<()> {
    let tasks = dir.join("tasks");
    std::fs::create_dir_all(&tasks).map_err(|e| Error::io(&tasks, e))?;
    demo_corpus().write_jsonl(&dir.join("notes.jsonl"))?;
    for (path, text) in [
        (dir.join("pipeline.toml"), DEMO_PIPELINE),
        (tasks.join("diagnoses.toml"), DEMO_MULTILABEL_TASK),
        (tasks.join("sepsis.toml"), DEMO_BINARY_TASK),
        (dir.join("fairness.toml"), DEMO_FAIRNESS),
    ] {
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
