use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ioda_core::experiment::{cmd_collect, Assets};
use ioda_core::prelude::*;
use ioda_core::session::{ClientMessage, SessionRegistry};
use proptest::prelude::*;

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn shipped_scenarios_match_the_detour_scene() {
    let cases = [
        ("detour-ioda", EnvVariant::FreezeYOutside, true),
        ("detour-leave-penalty", EnvVariant::LeavePenalty, false),
        ("detour-freeze", EnvVariant::FreezeYOutside, false),
    ];
    for (name, variant, ioda) in cases {
        let cfg = ScenarioConfig::load(scenarios_dir().join(format!("{name}.conf"))).unwrap();
        assert_eq!(cfg, ScenarioConfig::detour(variant, ioda), "{name}");
    }
}

struct Shared {
    _dir: tempfile::TempDir,
    cfg: ScenarioConfig,
    assets: Assets,
}

fn shared() -> &'static Shared {
    static S: OnceLock<Shared> = OnceLock::new();
    S.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ScenarioConfig::detour(EnvVariant::FreezeYOutside, true);
        cfg.rollouts.count = 400;
        cfg.rollouts.path = dir.path().join("d.jsonl");
        cmd_collect(&cfg).unwrap();
        let assets = Assets::load(&cfg).unwrap();
        Shared {
            _dir: dir,
            cfg,
            assets,
        }
    })
}

#[test]
fn scripted_session_replays_in_batch_loop() {
    let s = shared();
    let reg = SessionRegistry::new();
    let (id, _) = reg.create(s.cfg.clone()).unwrap();
    let script = [
        (
            0,
            ClientMessage::Cmd {
                axes: ioda_core::session::AxisValues {
                    x: Some(-0.05),
                    y: None,
                },
            },
        ),
        (12, ClientMessage::ToggleIoda { on: false }),
        (
            14,
            ClientMessage::Cmd {
                axes: ioda_core::session::AxisValues {
                    x: Some(-0.01),
                    y: None,
                },
            },
        ),
        (30, ClientMessage::ToggleIoda { on: true }),
        (
            31,
            ClientMessage::Cmd {
                axes: ioda_core::session::AxisValues {
                    x: Some(0.05),
                    y: None,
                },
            },
        ),
    ];
    for k in 0..60 {
        let msg = script
            .iter()
            .find(|(at, _)| *at == k)
            .map(|(_, m)| m.clone());
        reg.session_tick(id, msg).unwrap();
    }
    let session = reg.get(id).unwrap();
    let session = session.lock().unwrap();
    let log = session.command_log().to_vec();
    assert_eq!(log.len(), 60);
    let replayed = session.pipeline().replay(&session.start(), log).unwrap();
    assert_eq!(replayed.as_slice(), session.trajectory());
}

#[test]
fn sessions_are_isolated_under_concurrency() {
    let s = shared();
    let reg = SessionRegistry::new();
    let ids: Vec<u64> = (0..4)
        .map(|_| reg.create(s.cfg.clone()).unwrap().0)
        .collect();
    std::thread::scope(|scope| {
        for (k, id) in ids.iter().enumerate() {
            let reg = &reg;
            scope.spawn(move || {
                let x = -0.01 * (k as f64 + 1.0);
                for _ in 0..40 {
                    let m = ClientMessage::Cmd {
                        axes: ioda_core::session::AxisValues {
                            x: Some(x),
                            y: None,
                        },
                    };
                    reg.session_tick(*id, Some(m)).unwrap();
                }
            });
        }
    });
    for (k, id) in ids.iter().enumerate() {
        let session = reg.get(*id).unwrap();
        let session = session.lock().unwrap();
        let x = -0.01 * (k as f64 + 1.0);
        assert!(session.command_log().iter().all(|(_, u)| u.x == Some(x)));
        let replayed = session
            .pipeline()
            .replay(&session.start(), session.command_log().iter().copied())
            .unwrap();
        assert_eq!(replayed.as_slice(), session.trajectory());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn projected_steps_meet_the_expectation_exactly(
        ax in -0.5f64..1.5, ay in -0.5f64..1.5, gx in 0.0f64..1.0, gy in 0.0f64..1.0,
        ux in -0.05f64..0.05, seed in 0u64..8,
    ) {
        let s = shared();
        let p = s.assets.pipeline(&s.cfg, seed).unwrap();
        let w = ExpectationModel::for_pipeline(&p);
        let state = State::new(Vec2::new(ax, ay), Vec2::new(gx, gy));
        let d = p.ioda_step(0, &state, &UserCommand::x(ux)).unwrap();
        if d.ood {
            prop_assert_eq!(w.predictability_gap(&d, &p).unwrap(), 0.0);
            prop_assert_eq!(w.expected_next(&state, &d.user_command, &p).unwrap(), d.next_state);
        } else {
            prop_assert_eq!(d, p.baseline_step(0, &state, &UserCommand::x(ux)).unwrap());
        }
    }
}
