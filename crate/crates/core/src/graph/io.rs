//! Pose-graph persistence.
//!
//! `graph.txt` is line-oriented text: `V <id> <pose>` for teach vertices
//! and `E <odom|loc> <node> <node> <pose>` for edges, where a pose is the
//! row-major 12-number upper 3x4 block and nodes are `T<i>` (teach) or
//! `R<i>` (repeat). Submaps live in sibling `submap_<id>.dlp` files in the
//! binary frame format, positions only; normals are recomputed on load.

use super::{compute_submap_normals, EdgeKind, NodeRef, PoseGraph, TeachVertex};
use crate::cloud::{io as frame_io, LidarFrame, LidarPoint};
use crate::geom::{Pose, Vec3};
use crate::icp::LocalMap;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("submap file missing for vertex {0}")]
    MissingSubmap(usize),
    #[error("teach edge missing between vertices {0} and {1}")]
    MissingEdge(usize, usize),
}

fn format_pose(out: &mut String, pose: &Pose) {
    for v in pose.to_row_major() {
        let _ = write!(out, " {v}");
    }
}

fn node_token(node: &NodeRef) -> String {
    match node {
        NodeRef::Teach(i) => format!("T{i}"),
        NodeRef::Repeat(i) => format!("R{i}"),
    }
}

pub fn save_graph(graph: &PoseGraph, dir: &Path) -> Result<(), GraphIoError> {
    std::fs::create_dir_all(dir)?;
    let mut text = String::new();
    for v in &graph.vertices {
        let _ = write!(text, "V {}", v.id);
        format_pose(&mut text, &v.pose);
        text.push('\n');

        let mut frame = LidarFrame::new(0.0, 1.0);
        frame.points = v
            .cloud
            .iter()
            .map(|&p| LidarPoint::new(p, 0.0, 0.0))
            .collect();
        frame_io::write_frame_file(&dir.join(format!("submap_{}.dlp", v.id)), &frame)?;
    }
    for e in graph.edges() {
        let kind = match e.kind {
            EdgeKind::Odometry => "odom",
            EdgeKind::Localization => "loc",
        };
        let _ = write!(
            text,
            "E {kind} {} {}",
            node_token(&e.src),
            node_token(&e.dst)
        );
        format_pose(&mut text, &e.relative);
        text.push('\n');
    }
    std::fs::write(dir.join("graph.txt"), text)?;
    Ok(())
}

fn parse_node(token: &str, line: usize) -> Result<NodeRef, GraphIoError> {
    let (kind, index) = token.split_at(1);
    let index: usize = index.parse().map_err(|_| GraphIoError::Parse {
        line,
        message: format!("bad node reference {token:?}"),
    })?;
    match kind {
        "T" => Ok(NodeRef::Teach(index)),
        "R" => Ok(NodeRef::Repeat(index)),
        _ => Err(GraphIoError::Parse {
            line,
            message: format!("bad node reference {token:?}"),
        }),
    }
}

fn parse_pose(fields: &[&str], line: usize) -> Result<Pose, GraphIoError> {
    if fields.len() != 12 {
        return Err(GraphIoError::Parse {
            line,
            message: format!("expected 12 pose numbers, found {}", fields.len()),
        });
    }
    let mut values = [0.0; 12];
    for (k, f) in fields.iter().enumerate() {
        values[k] = f.parse().map_err(|_| GraphIoError::Parse {
            line,
            message: format!("bad number {f:?}"),
        })?;
    }
    Ok(Pose::from_row_major(&values))
}

/// Loads a teach graph, recomputing submap normals with the preprocessing
/// parameters. Repeat-branch edges are ignored (they describe a past run,
/// not the map).
pub fn load_graph(dir: &Path, prep: &super::PrepConfig) -> Result<PoseGraph, GraphIoError> {
    let text = std::fs::read_to_string(dir.join("graph.txt"))?;
    let mut poses: BTreeMap<usize, Pose> = BTreeMap::new();
    let mut teach_edges: BTreeMap<usize, Pose> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        match fields[0] {
            "V" => {
                if fields.len() != 14 {
                    return Err(GraphIoError::Parse {
                        line,
                        message: format!("expected `V id pose`, found {} fields", fields.len()),
                    });
                }
                let id: usize = fields[1].parse().map_err(|_| GraphIoError::Parse {
                    line,
                    message: format!("bad vertex id {:?}", fields[1]),
                })?;
                poses.insert(id, parse_pose(&fields[2..], line)?);
            }
            "E" => {
                if fields.len() != 16 {
                    return Err(GraphIoError::Parse {
                        line,
                        message: format!(
                            "expected `E kind src dst pose`, found {} fields",
                            fields.len()
                        ),
                    });
                }
                let kind = match fields[1] {
                    "odom" => EdgeKind::Odometry,
                    "loc" => EdgeKind::Localization,
                    other => {
                        return Err(GraphIoError::Parse {
                            line,
                            message: format!("unknown edge kind {other:?}"),
                        })
                    }
                };
                let src = parse_node(fields[2], line)?;
                let dst = parse_node(fields[3], line)?;
                let pose = parse_pose(&fields[4..], line)?;
                if kind == EdgeKind::Odometry {
                    if let (NodeRef::Teach(a), NodeRef::Teach(b)) = (src, dst) {
                        if b == a + 1 {
                            teach_edges.insert(a, pose);
                        }
                    }
                }
            }
            other => {
                return Err(GraphIoError::Parse {
                    line,
                    message: format!("unknown record {other:?}"),
                });
            }
        }
    }

    let mut graph = PoseGraph::default();
    for (expected, (&id, &pose)) in poses.iter().enumerate() {
        if id != expected {
            return Err(GraphIoError::Parse {
                line: 0,
                message: format!("vertex ids must be dense, missing {expected}"),
            });
        }
        let path = dir.join(format!("submap_{id}.dlp"));
        if !path.exists() {
            return Err(GraphIoError::MissingSubmap(id));
        }
        let frame = frame_io::read_frame_file(&path)?;
        let cloud: Vec<Vec3> = frame.points.iter().map(|p| p.position).collect();
        let relative = if id == 0 {
            None
        } else {
            Some(
                *teach_edges
                    .get(&(id - 1))
                    .ok_or(GraphIoError::MissingEdge(id - 1, id))?,
            )
        };
        graph.add_teach_vertex(
            TeachVertex::from_cloud(id, pose, cloud, &prep.submap_normals),
            relative,
        );
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{exp_map, Twist};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_graph() -> PoseGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(131);
        let mut graph = PoseGraph::default();
        let mut pose = Pose::identity();
        let params = crate::icp::NormalParams {
            k_neighbors: 8,
            score_threshold: 0.9,
            ..Default::default()
        };
        for m in 0..3 {
            let cloud: Vec<Vec3> = (0..60)
                .map(|_| {
                    Vec3::new(
                        rng.gen_range(2.0..20.0),
                        rng.gen_range(-8.0..8.0),
                        -1.5 + 0.001 * rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let rel = exp_map(&Twist::new(
                Vec3::new(10.0, 0.1 * m as f64, 0.0),
                Vec3::new(0.0, 0.0, 0.05),
            ));
            let relative = (m > 0).then_some(rel);
            if m > 0 {
                pose = pose.compose(&rel);
            }
            graph.add_teach_vertex(TeachVertex::from_cloud(m, pose, cloud, &params), relative);
        }
        graph
    }

    #[test]
    fn graph_round_trip_preserves_structure() {
        let graph = sample_graph();
        let dir = std::env::temp_dir().join(format!("topoloc-graph-{}", std::process::id()));
        save_graph(&graph, &dir).unwrap();
        let prep = crate::graph::PrepConfig {
            k_neighbors: 8,
            score_threshold: 0.9,
            submap_normals: crate::icp::NormalParams {
                k_neighbors: 8,
                score_threshold: 0.9,
                ..Default::default()
            },
            ..crate::graph::PrepConfig::default()
        };
        let loaded = load_graph(&dir, &prep).unwrap();
        assert_eq!(loaded.vertices.len(), graph.vertices.len());
        for (a, b) in graph.vertices.iter().zip(&loaded.vertices) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.pose, b.pose);
            assert_eq!(a.cloud, b.cloud);
            assert_eq!(a.submap.len(), b.submap.len());
            for (pa, pb) in a.submap.points().iter().zip(b.submap.points()) {
                assert_eq!(pa.position, pb.position);
                assert_eq!(pa.normal, pb.normal);
            }
        }
        for (a, b) in [(0, 1), (0, 2), (2, 1)] {
            assert_eq!(
                graph.teach_relative(a, b).unwrap(),
                loaded.teach_relative(a, b).unwrap()
            );
        }

        // Re-saving is byte-identical.
        let first = std::fs::read(dir.join("graph.txt")).unwrap();
        save_graph(&loaded, &dir).unwrap();
        let second = std::fs::read(dir.join("graph.txt")).unwrap();
        assert_eq!(first, second);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = std::env::temp_dir().join(format!("topoloc-badgraph-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("graph.txt"), "V 0 1 0 0\n").unwrap();
        match load_graph(&dir, &crate::graph::PrepConfig::default()) {
            Err(GraphIoError::Parse { line: 1, .. }) => {}
            other => panic!("expected parse error on line 1, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
