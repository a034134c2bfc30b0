#!/usr/bin/env python3
"""
Analyze and visualize DNP experiment output (bench progress, throughput curve).
All outputs are saved to a timestamped folder in analysis_results/
"""

import argparse
import os
from datetime import datetime
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns


def create_output_dir():
    """Create a timestamped output directory for analysis results"""
    timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
    output_dir = Path(f"analysis_results/bench_{timestamp}")
    output_dir.mkdir(parents=True, exist_ok=True)
    print(f"\n📁 Created output directory: {output_dir}")
    return output_dir


def load_progress(ckpt_dir="ckpt"):
    path = os.path.join(ckpt_dir, "bench_progress.csv")
    if not os.path.exists(path):
        return pd.DataFrame()
    df = pd.read_csv(path)
    df['ok'] = df['ok'].astype(str) == 'True'
    return df


def load_curve(ckpt_dir="ckpt"):
    path = os.path.join(ckpt_dir, "bench_curve.csv")
    if not os.path.exists(path):
        return pd.DataFrame()
    return pd.read_csv(path).sort_values('n_probes')


def summarize(df, output_dir):
    """Pass rate and the measured quantities per experiment"""
    summary = df.groupby('experiment').agg(
        runs=('run', 'count'),
        passed=('ok', 'sum'),
        latency_s=('latency_s', 'mean'),
        window_ns=('window_ns', 'mean'),
        dropped=('dropped', 'sum'),
    )
    summary['pass_rate'] = summary['passed'] / summary['runs']

    print("\n" + "=" * 60)
    print("EXPERIMENT SUMMARY")
    print("=" * 60)
    print(summary.to_string())

    filename = output_dir / 'summary_statistics.csv'
    summary.to_csv(filename)
    print(f"\n💾 Summary statistics saved to: {filename}")
    return summary


def plot_throughput_curve(curve, output_dir):
    """Measured pps against probes per packet, with the calibrated model"""
    sns.set_style("whitegrid")
    fig, axes = plt.subplots(1, 2, figsize=(15, 6))

    ax1 = axes[0]
    ax1.plot(curve['n_probes'], curve['pps'], marker='o', color='steelblue', label='Measured')
    ax1.plot(curve['n_probes'], curve['predicted_pps'], linestyle='--', color='red', label='Cost model')
    ax1.set_xlabel('Counter probes per packet')
    ax1.set_ylabel('Packets per second')
    ax1.set_title('Forwarding Throughput vs Probe Load')
    ax1.grid(True, alpha=0.3)
    ax1.legend()

    # The fitted serial model is linear in 1/pps
    ax2 = axes[1]
    ax2.scatter(curve['mem_accesses'], 1e9 / curve['pps'], color='purple', s=50, label='Measured')
    ax2.plot(curve['mem_accesses'], 1e9 / curve['predicted_pps'], color='red', label='Least-squares fit')
    ax2.set_xlabel('Memory accesses per packet')
    ax2.set_ylabel('ns per packet')
    ax2.set_title('Per-Packet Service Time')
    ax2.grid(True, alpha=0.3)
    ax2.legend()

    plt.tight_layout()
    filename = output_dir / 'throughput_curve.png'
    plt.savefig(filename, dpi=150, bbox_inches='tight')
    print(f"📊 Throughput curve saved to: {filename}")
    plt.close(fig)

    within = curve[(curve['ratio'] > 1 / 1.3) & (curve['ratio'] < 1.3)]
    print(f"   {len(within)}/{len(curve)} points within x/÷1.3 of the model")


def plot_deploy_latency(df, output_dir):
    """Runtime install vs full reload, per seed"""
    deploy = df[df['experiment'] == 'deploy'].dropna(subset=['latency_s'])
    if deploy.empty:
        return
    sns.set_style("whitegrid")
    fig, axes = plt.subplots(1, 2, figsize=(15, 6))

    ax1 = axes[0]
    means = [deploy['latency_s'].mean() * 1e3]
    stds = [deploy['latency_s'].std() * 1e3 / np.sqrt(len(deploy))]
    ax1.bar([0], means, yerr=stds, capsize=5, alpha=0.7, color='steelblue')
    ax1.set_xticks([0])
    ax1.set_xticklabels(['dynamic install'])
    ax1.set_ylabel('Wall-clock latency (ms)')
    ax1.set_title('Deployment Latency (with Standard Error)')
    ax1.grid(axis='y', alpha=0.3)
    ax1.text(0, means[0] + stds[0], f'n={len(deploy)}', ha='center', fontsize=9)

    ax2 = axes[1]
    sns.histplot(deploy['window_ns'] / 1e6, ax=ax2, color='purple', bins=10)
    ax2.set_xlabel('Static reload window (ms of virtual time)')
    ax2.set_title('Interruption Window of the Static Path')

    plt.tight_layout()
    filename = output_dir / 'deploy_latency.png'
    plt.savefig(filename, dpi=150, bbox_inches='tight')
    print(f"📊 Deployment latency plot saved to: {filename}")
    plt.close(fig)


def main():
    parser = argparse.ArgumentParser(description='Analyze DNP experiment batch output')
    parser.add_argument('--ckpt-dir', default='ckpt',
                        help='Directory holding bench_progress.csv and bench_curve.csv (default: ckpt)')
    args = parser.parse_args()

    print("=" * 60)
    print("DNP EXPERIMENT ANALYSIS")
    print("=" * 60)

    output_dir = create_output_dir()
    df = load_progress(args.ckpt_dir)
    curve = load_curve(args.ckpt_dir)

    if df.empty and curve.empty:
        print(f"❌ No experiment output found in {args.ckpt_dir}/ directory!")
        return

    if not df.empty:
        print(f"✅ Found {len(df)} experiment runs to analyze")
        summarize(df, output_dir)
        plot_deploy_latency(df, output_dir)
    if not curve.empty:
        plot_throughput_curve(curve, output_dir)

    print(f"\n✅ Analysis complete! All results saved to: {output_dir}")


if __name__ == "__main__":
    main()
