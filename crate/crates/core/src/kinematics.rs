//! Skinned template, forward kinematics and linear blend skinning of
//! gaussians from canonical to posed space.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::gaussian::Gaussian3D;
use crate::kdtree::KdTree;
use crate::rotation::axis_angle_to_matrix;

/// Skeleton plus skinned rest-pose vertices. Stands in for a parametric
/// body model: joints form a tree, every vertex carries a row of skinning
/// weights over the joints.
#[derive(Debug, Clone)]
pub struct SkinnedTemplate {
    parents: Vec<Option<usize>>,
    rest_joints: Vec<Vector3<f64>>,
    vertices: Vec<Vector3<f64>>,
    /// V×K, row-stochastic.
    weights: Vec<Vec<f64>>,
    /// Joint indices with every parent before its children.
    order: Vec<usize>,
    index: KdTree,
}

impl PartialEq for SkinnedTemplate {
    fn eq(&self, other: &Self) -> bool {
        self.parents == other.parents
            && self.rest_joints == other.rest_joints
            && self.vertices == other.vertices
            && self.weights == other.weights
    }
}

impl SkinnedTemplate {
    pub fn new(
        parents: Vec<Option<usize>>,
        rest_joints: Vec<Vector3<f64>>,
        vertices: Vec<Vector3<f64>>,
        weights: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let k = parents.len();
        if k == 0 {
            return Err(Error::Template("no joints".into()));
        }
        if rest_joints.len() != k {
            return Err(Error::Template(format!(
                "{} rest joints for {k} parents",
                rest_joints.len()
            )));
        }
        if vertices.is_empty() {
            return Err(Error::Template("no vertices".into()));
        }
        if weights.len() != vertices.len() {
            return Err(Error::Template(format!(
                "{} weight rows for {} vertices",
                weights.len(),
                vertices.len()
            )));
        }
        let roots = parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::Template(format!("expected exactly one root, found {roots}")));
        }
        for (j, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= k || p == j {
                    return Err(Error::Template(format!("joint {j} has invalid parent {p}")));
                }
            }
        }
        let order = topological_order(&parents)?;
        for (v, row) in weights.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Template(format!(
                    "vertex {v}: {} weights for {k} joints",
                    row.len()
                )));
            }
            check_weight_row(row).map_err(|e| Error::Template(format!("vertex {v}: {e}")))?;
        }
        for p in rest_joints.iter().chain(&vertices) {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::Template("non-finite coordinate".into()));
            }
        }
        let index = KdTree::new(&vertices);
        Ok(Self {
            parents,
            rest_joints,
            vertices,
            weights,
            order,
            index,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn rest_joints(&self) -> &[Vector3<f64>] {
        &self.rest_joints
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn vertex_index(&self) -> &KdTree {
        &self.index
    }

    pub fn root(&self) -> usize {
        self.order[0]
    }

    /// Center and radius of the bounding sphere of the vertices (about
    /// their centroid).
    pub fn extent(&self) -> (Vector3<f64>, f64) {
        let c = self.vertices.iter().sum::<Vector3<f64>>() / self.vertices.len() as f64;
        let r = self.vertices.iter().map(|v| (v - c).norm()).fold(0.0, f64::max);
        (c, r)
    }

    /// Axis-aligned bounds of the vertices.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }
}

fn topological_order(parents: &[Option<usize>]) -> Result<Vec<usize>> {
    let k = parents.len();
    let mut children = vec![Vec::new(); k];
    let mut root = None;
    for (j, p) in parents.iter().enumerate() {
        match p {
            Some(p) => children[*p].push(j),
            None => root = Some(j),
        }
    }
    let mut order = Vec::with_capacity(k);
    let mut stack = vec![root.ok_or_else(|| Error::Template("no root".into()))?];
    while let Some(j) = stack.pop() {
        order.push(j);
        stack.extend(children[j].iter().rev());
    }
    if order.len() != k {
        return Err(Error::Template("parent array contains a cycle".into()));
    }
    Ok(order)
}

fn check_weight_row(row: &[f64]) -> std::result::Result<(), String> {
    if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err("negative or non-finite weight".into());
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(format!("weights sum to {sum}"));
    }
    Ok(())
}

/// Joint rotations (axis-angle, radians) and a root translation.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub joint_rotations: Vec<Vector3<f64>>,
    pub root_translation: Vector3<f64>,
}

impl Pose {
    pub fn zero(joint_count: usize) -> Self {
        Self {
            joint_rotations: vec![Vector3::zeros(); joint_count],
            root_translation: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (j, r) in self.joint_rotations.iter().enumerate() {
            if !r.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("pose joint {j}")));
            }
            if r.norm() >= std::f64::consts::PI + 1e-3 {
                return Err(Error::Config(format!(
                    "pose joint {j}: axis-angle norm {} outside canonical range",
                    r.norm()
                )));
            }
        }
        if !self.root_translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("pose translation".into()));
        }
        Ok(())
    }

    pub fn local_rotations(&self) -> Vec<Matrix3<f64>> {
        self.joint_rotations.iter().map(axis_angle_to_matrix).collect()
    }
}

/// Per-joint rigid maps x ↦ G_k x + b_k from canonical to posed space.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTransforms {
    pub rotations: Vec<Matrix3<f64>>,
    pub translations: Vec<Vector3<f64>>,
}

impl JointTransforms {
    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }
}

pub fn forward_kinematics(template: &SkinnedTemplate, pose: &Pose) -> Result<JointTransforms> {
    if pose.joint_rotations.len() != template.joint_count() {
        return Err(Error::Shape(format!(
            "pose has {} joints, template has {}",
            pose.joint_rotations.len(),
            template.joint_count()
        )));
    }
    Ok(forward_kinematics_local(
        template,
        &pose.local_rotations(),
        &pose.root_translation,
    ))
}

/// Forward kinematics from per-joint local rotation matrices. Each joint
/// rotates its subtree about its own rest position.
pub fn forward_kinematics_local(
    template: &SkinnedTemplate,
    local: &[Matrix3<f64>],
    translation: &Vector3<f64>,
) -> JointTransforms {
    let k = template.joint_count();
    let rest = &template.rest_joints;
    let mut world = vec![Matrix3::identity(); k];
    // Posed position of each joint.
    let mut origin = vec![Vector3::zeros(); k];
    for &j in &template.order {
        match template.parents[j] {
            None => {
                world[j] = local[j];
                origin[j] = rest[j] + translation;
            }
            Some(p) => {
                world[j] = world[p] * local[j];
                origin[j] = world[p] * (rest[j] - rest[p]) + origin[p];
            }
        }
    }
    let translations = (0..k).map(|j| origin[j] - world[j] * rest[j]).collect();
    JointTransforms {
        rotations: world,
        translations,
    }
}

/// Reverse-mode pass of [`forward_kinematics_local`]. Returns gradients on
/// the local rotation matrices and on the root translation.
pub fn forward_kinematics_backward(
    template: &SkinnedTemplate,
    local: &[Matrix3<f64>],
    jt: &JointTransforms,
    d_rot: &[Matrix3<f64>],
    d_trans: &[Vector3<f64>],
) -> (Vec<Matrix3<f64>>, Vector3<f64>) {
    let k = template.joint_count();
    let rest = &template.rest_joints;
    let mut d_world: Vec<Matrix3<f64>> = d_rot.to_vec();
    let mut d_origin: Vec<Vector3<f64>> = d_trans.to_vec();
    // b_j = o_j − A_j J_j
    for j in 0..k {
        d_world[j] -= d_trans[j] * rest[j].transpose();
    }
    let mut d_local = vec![Matrix3::zeros(); k];
    let mut d_translation = Vector3::zeros();
    for &j in template.order.iter().rev() {
        match template.parents[j] {
            None => {
                d_local[j] = d_world[j];
                d_translation = d_origin[j];
            }
            Some(p) => {
                let parent_world = jt.rotations[p];
                d_local[j] = parent_world.transpose() * d_world[j];
                let dw = d_world[j] * local[j].transpose() + d_origin[j] * (rest[j] - rest[p]).transpose();
                d_world[p] += dw;
                let dor = d_origin[j];
                d_origin[p] += dor;
            }
        }
    }
    (d_local, d_translation)
}

/// G = Σ w_k G_k, b = Σ w_k b_k. Weights must be nonnegative and sum to 1.
pub fn blend_transforms(weights: &[f64], jt: &JointTransforms) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if weights.len() != jt.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} joints",
            weights.len(),
            jt.len()
        )));
    }
    check_weight_row(weights).map_err(Error::Weights)?;
    Ok(blend_transforms_unchecked(weights, jt))
}

pub fn blend_transforms_unchecked(weights: &[f64], jt: &JointTransforms) -> (Matrix3<f64>, Vector3<f64>) {
    let mut g = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (k, &w) in weights.iter().enumerate() {
        if w != 0.0 {
            g += jt.rotations[k] * w;
            b += jt.translations[k] * w;
        }
    }
    (g, b)
}

/// pᵗ = G pᶜ + b, Σᵗ = G Σᶜ Gᵀ.
pub fn lbs_transform(
    position: &Vector3<f64>,
    covariance: &Matrix3<f64>,
    g: &Matrix3<f64>,
    b: &Vector3<f64>,
) -> (Vector3<f64>, Matrix3<f64>) {
    (g * position + b, g * covariance * g.transpose())
}

pub fn lbs_transform_gaussian(
    gaussian: &Gaussian3D,
    g: &Matrix3<f64>,
    b: &Vector3<f64>,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    Ok(lbs_transform(&gaussian.position, &gaussian.covariance()?, g, b))
}

/// Skinning weights of the template vertex nearest to `p`, and that
/// vertex's index. Ties go to the lowest vertex index.
pub fn nearest_vertex_weights<'a>(template: &'a SkinnedTemplate, p: &Vector3<f64>) -> (&'a [f64], usize) {
    let (v, _) = template
        .index
        .nearest(p, None)
        .expect("template has at least one vertex");
    (&template.weights[v], v)
}

/// Euclidean distance from `p` to the nearest template vertex.
pub fn distance_to_template(template: &SkinnedTemplate, p: &Vector3<f64>) -> f64 {
    template
        .index
        .nearest(p, None)
        .map(|(_, d2)| d2.sqrt())
        .expect("template has at least one vertex")
}
