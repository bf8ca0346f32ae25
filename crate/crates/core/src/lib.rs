//! Synthetic depth-image generation and depth feature learning.
//!
//! Meshes are normalized and morphed ([`mesh_io`]), rendered to depth maps
//! over a sampled configuration space ([`depth_render`], [`config_sampler`]),
//! augmented at training time ([`augment`]) and used to train a small CNN
//! ([`convnet`]) whose layer activations feed linear SVMs and multi-kernel
//! fusion ([`kernel_fusion`]), scored by [`eval_harness`].

pub mod augment;
pub mod config_sampler;
pub mod convnet;
pub mod dataset_store;
pub mod depth_render;
pub mod eval_harness;
pub mod geom;
pub mod kernel_fusion;
pub mod mesh_io;
pub mod pipeline;
pub mod primitives;
pub mod rng;

