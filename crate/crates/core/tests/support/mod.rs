#![allow(dead_code)]

pub mod models;
pub mod opcases;
pub mod tables;
