import numpy as np
import seaborn as sns
from matplotlib import pyplot as plt

from src.utils.common import make_sure_dir_exists, save_plt_fig


LOSS_COLUMNS = ['l_seg_s', 'l_seg_t', 'd_loss', 'g_loss']


def plot_training_log(log_df, output_dir, name='training'):
    make_sure_dir_exists(output_dir)
    columns = [c for c in LOSS_COLUMNS if c in log_df and log_df[c].notna().any()]
    fig, axes = plt.subplots(1, 3, figsize=(18, 5))
    long_df = log_df.melt(id_vars='step', value_vars=columns, var_name='loss', value_name='value').dropna()
    sns.lineplot(data=long_df, x='step', y='value', hue='loss', ax=axes[0])
    axes[0].set_title('Losses')
    sns.lineplot(data=log_df, x='step', y='lr', ax=axes[1], color='black')
    axes[1].set_title('Learning rate')
    if 'target_iou' in log_df and log_df['target_iou'].notna().any():
        sns.lineplot(data=log_df.dropna(subset=['target_iou']), x='step', y='target_iou', marker='o', ax=axes[2])
        axes[2].set_ylim(0, 1)
    axes[2].set_title('Target validation IoU')
    for ax in axes:
        ax.grid(visible=True)
    plt.tight_layout()
    save_plt_fig(f'{output_dir}/{name}.png')


def plot_ablation(ablation_df, output_dir):
    make_sure_dir_exists(output_dir)
    for group, df in ablation_df.groupby('group', sort=False):
        plt.figure(figsize=(8, 5))
        ax = sns.barplot(data=df, x='variant', y='target_iou', color='#95d4f3')
        for patch, value in zip(ax.patches, df['target_iou']):
            ax.annotate(f'{100 * value:.1f}', (patch.get_x() + patch.get_width() / 2, patch.get_height()),
                        ha='center', va='bottom')
        ax.set_ylim(0, 1)
        ax.set_title(group)
        plt.xticks(rotation=30)
        plt.grid(visible=True, axis='y')
        plt.tight_layout()
        save_plt_fig(f'{output_dir}/ablation.{group}.png')


def plot_overlay(image, gt, pred, path, title=None):
    """Image, ground truth and prediction side by side; errors coloured on the last panel."""
    rgb = np.transpose(image, (1, 2, 0))
    errors = np.zeros(gt.shape + (3,))
    errors[(pred == 1) & (gt == 1)] = (0.2, 0.8, 0.2)
    errors[(pred == 1) & (gt == 0)] = (0.9, 0.2, 0.2)
    errors[(pred == 0) & (gt == 1)] = (0.2, 0.4, 0.9)

    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    for ax, panel, label in zip(axes, (rgb, gt, errors), ('image', 'ground truth', 'prediction')):
        ax.imshow(panel, cmap='gray' if panel.ndim == 2 else None, vmin=0, vmax=1)
        ax.set_title(label)
        ax.axis('off')
    if title:
        fig.suptitle(title)
    plt.tight_layout()
    save_plt_fig(path)
