//! Regenerates the bundled feeder files in `data/`.
//!
//! ```text
//! cargo run --example gen_feeders -- crates/core/data
//! ```

use std::path::PathBuf;

use faultloc::feeder::{BaseDoc, BranchDoc, FeederDocument, InjectionDoc, NodeDoc, PmuDoc};
use faultloc::{FeederModel, PhaseSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Series impedance per km of a three-wire overhead line, Ω (row-major 3×3).
struct Conductor {
    r: [f64; 9],
    x: [f64; 9],
}

// overhead line spacings typical of long rural 24.9 kV circuits (per km)
const RURAL_3PH: Conductor = Conductor {
    r: [
        1.200, 0.145, 0.147, 0.145, 1.191, 0.142, 0.147, 0.142, 1.195,
    ],
    x: [
        0.878, 0.400, 0.354, 0.400, 0.888, 0.326, 0.354, 0.326, 0.883,
    ],
};
const RURAL_1PH: Conductor = Conductor {
    r: [1.740, 0.0, 0.0, 0.0, 1.740, 0.0, 0.0, 0.0, 1.740],
    x: [0.923, 0.0, 0.0, 0.0, 0.923, 0.0, 0.0, 0.0, 0.923],
};

// urban 4.16 kV underground/overhead mix (per km)
const URBAN_3PH: Conductor = Conductor {
    r: [
        0.2857, 0.0966, 0.0982, 0.0966, 0.2947, 0.0950, 0.0982, 0.0950, 0.2904,
    ],
    x: [
        0.8452, 0.4459, 0.3770, 0.4459, 0.8315, 0.4028, 0.3770, 0.4028, 0.8376,
    ],
};
const URBAN_1PH: Conductor = Conductor {
    r: [0.8300, 0.0, 0.0, 0.0, 0.8300, 0.0, 0.0, 0.0, 0.8300],
    x: [0.8580, 0.0, 0.0, 0.0, 0.8580, 0.0, 0.0, 0.0, 0.8580],
};

struct Builder {
    doc: FeederDocument,
}

impl Builder {
    fn new(name: &str, kv_ll: f64, mva: f64, root: &str) -> Builder {
        let doc = FeederDocument {
            name: name.into(),
            base: BaseDoc { kv_ll, mva },
            substation: root.into(),
            nodes: vec![NodeDoc {
                id: root.into(),
                phases: PhaseSet::ABC,
            }],
            branches: vec![],
            loads: vec![],
            dgs: vec![],
            pmus: vec![],
        };
        Builder { doc }
    }

    fn phases_of(&self, node: &str) -> PhaseSet {
        self.doc
            .nodes
            .iter()
            .find(|n| n.id == node)
            .map(|n| n.phases)
            .expect("known node")
    }

    fn line(&mut self, from: &str, to: &str, km: f64, phases: PhaseSet, c: &Conductor) {
        let mut r = [0.0; 9];
        let mut x = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                let pi = faultloc::Phase::from_index(i);
                let pj = faultloc::Phase::from_index(j);
                if phases.contains(pi) && phases.contains(pj) {
                    r[3 * i + j] = c.r[3 * i + j] * km;
                    x[3 * i + j] = c.x[3 * i + j] * km;
                }
            }
        }
        self.doc.nodes.push(NodeDoc {
            id: to.into(),
            phases,
        });
        self.doc.branches.push(BranchDoc {
            id: format!("{from}-{to}"),
            from: from.into(),
            to: to.into(),
            length_m: (km * 1e3).round(),
            r_ohm: r,
            x_ohm: x,
        });
    }

    /// Spot load spread over the node's phases with a mild imbalance.
    fn load(&mut self, node: &str, kw: f64, pf: f64, rng: &mut ChaCha8Rng) {
        let ph = self.phases_of(node);
        let share = kw * 1e3 / ph.len() as f64;
        let q_ratio = (1.0 - pf * pf).sqrt() / pf;
        let mut p = [0.0; 3];
        let mut q = [0.0; 3];
        for phase in ph.iter() {
            let f = rng.gen_range(0.8..1.2);
            p[phase.index()] = (share * f).round();
            q[phase.index()] = (share * f * q_ratio).round();
        }
        self.doc.loads.push(InjectionDoc {
            node: node.into(),
            p_w: p,
            q_var: q,
        });
    }

    /// Unity power factor generation, balanced over three phases.
    fn dg(&mut self, node: &str, kw: f64) {
        let share = (kw * 1e3 / 3.0).round();
        self.doc.dgs.push(InjectionDoc {
            node: node.into(),
            p_w: [share; 3],
            q_var: [0.0; 3],
        });
    }

    fn pmu(&mut self, node: &str) {
        let branches = self
            .doc
            .branches
            .iter()
            .filter(|b| b.from == node || b.to == node)
            .map(|b| b.id.clone())
            .collect();
        self.doc.pmus.push(PmuDoc {
            node: node.into(),
            branches,
        });
    }
}

/// 34 nodes on a long 24.9 kV rural circuit: twelve trunk sections between
/// five micro-PMUs, laterals mostly hung at metered nodes.
pub fn feeder34() -> FeederDocument {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut b = Builder::new("feeder34", 24.9, 2.5, "800");
    let trunk: [&str; 13] = [
        "800", "802", "806", "808", "812", "814", "816", "824", "828", "830", "854", "852", "832",
    ];
    let lengths = [
        9.5, 10.5, 10.0, 9.0, 11.0, 10.0, 10.5, 9.5, 10.0, 9.0, 10.5, 10.0,
    ];
    for i in 0..12 {
        b.line(
            trunk[i],
            trunk[i + 1],
            lengths[i],
            PhaseSet::ABC,
            &RURAL_3PH,
        );
    }
    let one = |c: char| PhaseSet::parse(&c.to_string()).unwrap();
    // (attach, chain of lateral nodes, phases, km per section)
    let laterals: [(&str, &[&str], PhaseSet, f64); 11] = [
        ("802", &["810"], one('b'), 1.8),
        ("806", &["818", "820"], one('a'), 1.5),
        ("806", &["880"], one('c'), 1.3),
        ("808", &["842", "844", "846"], PhaseSet::ABC, 1.0),
        ("812", &["826"], one('b'), 1.2),
        ("816", &["856"], one('b'), 2.0),
        ("816", &["848", "860", "840"], PhaseSet::ABC, 0.9),
        ("830", &["888", "890"], PhaseSet::ABC, 1.2),
        ("830", &["864"], one('a'), 1.4),
        ("832", &["858", "862", "838"], one('c'), 1.1),
        ("832", &["874", "876", "878"], PhaseSet::ABC, 1.0),
    ];
    for (at, chain, ph, km) in laterals {
        let mut prev = at;
        for n in chain {
            let c = if ph.len() == 3 {
                &RURAL_3PH
            } else {
                &RURAL_1PH
            };
            b.line(prev, n, km, ph, c);
            prev = n;
        }
    }
    let ids: Vec<String> = b.doc.nodes.iter().map(|n| n.id.clone()).skip(1).collect();
    for id in &ids {
        let kw = if b.phases_of(id).len() == 3 {
            rng.gen_range(20.0..45.0)
        } else {
            rng.gen_range(8.0..18.0)
        };
        b.load(id, kw, 0.92, &mut rng);
    }
    b.dg("816", 120.0);
    b.dg("830", 90.0);
    b.dg("844", 60.0);
    for p in ["800", "808", "816", "830", "832"] {
        b.pmu(p);
    }
    b.doc
}

/// About 123 nodes on a compact 4.16 kV urban circuit: a 24-section trunk
/// with eight micro-PMUs (one pair adjacent) and randomly grown lateral trees.
pub fn feeder123() -> FeederDocument {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let mut b = Builder::new("feeder123", 4.16, 5.0, "150");
    let mut trunk = vec!["150".to_string()];
    trunk.extend((1..=24).map(|i| i.to_string()));
    for i in 0..24 {
        let km = rng.gen_range(0.10..0.20);
        b.line(&trunk[i], &trunk[i + 1], km, PhaseSet::ABC, &URBAN_3PH);
    }
    let pmu_at = [0usize, 4, 8, 12, 13, 17, 21, 24];
    let mut next = 25;
    while next <= 122 {
        // lateral trees hang anywhere but on the directly observed pair
        let at = loop {
            let t = rng.gen_range(0..24);
            if t != 12 && t != 13 {
                break t;
            }
        };
        let size = rng.gen_range(2..=8).min(123 - next);
        let phases = if size >= 5 {
            PhaseSet::ABC
        } else {
            PhaseSet::parse(["a", "b", "c"][rng.gen_range(0..3)]).unwrap()
        };
        let (c, km) = if phases.len() == 3 {
            (&URBAN_3PH, 0.08..0.15)
        } else {
            (&URBAN_1PH, 0.05..0.12)
        };
        let mut members = vec![trunk[at].clone()];
        for _ in 0..size {
            let id = next.to_string();
            next += 1;
            let parent = members[rng.gen_range(0..members.len())].clone();
            b.line(&parent, &id, rng.gen_range(km.clone()), phases, c);
            members.push(id);
        }
    }
    let ids: Vec<String> = b.doc.nodes.iter().map(|n| n.id.clone()).skip(1).collect();
    for id in &ids {
        let kw = if b.phases_of(id).len() == 3 {
            rng.gen_range(8.0..20.0)
        } else {
            rng.gen_range(3.0..10.0)
        };
        b.load(id, kw, 0.9, &mut rng);
    }
    for dg in ["6", "15", "20"] {
        b.dg(dg, 90.0);
    }
    for &i in &pmu_at {
        let id = trunk[i].clone();
        b.pmu(&id);
    }
    b.doc
}

fn main() {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("crates/core/data"));
    for doc in [feeder34(), feeder123()] {
        FeederModel::from_document(&doc).expect("generated feeder validates");
        let path = dir.join(format!("{}.json", doc.name));
        std::fs::write(&path, doc.to_json()).expect("write feeder");
        println!("wrote {}", path.display());
    }
}
