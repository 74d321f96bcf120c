//! Spiking networks: conversion from trained models, integrate-and-fire
//! simulation and single-layer on-line learning.

pub mod compile;
pub mod network;
pub mod online;
pub mod sim;

pub use compile::{
    fold_batchnorm, normalize_and_convert, normalize_and_convert_with, rate_correspondence, validate_convertible,
    ConversionReport, ConvertOptions, OutputShift, DEFAULT_PERCENTILE,
};
pub use network::{load_snn, read_snn, save_snn, write_snn, Encoding, SpikingLayer, SpikingNetwork};
pub use online::train_single_layer_online;
pub use sim::{
    poisson_encode, predict_dataset, readout, run_inference, step, sweep_csv, timestep_sweep, NeuronPopulation, RunTrace,
    SimConfig, SweepRow, DEFAULT_TIMESTEPS,
};
