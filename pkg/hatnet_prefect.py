import os

from prefect import flow, task

from hatnet import main, parse_arguments

SYNTH_DIR = 'data'
TRAIN_DIR = 'train'
EVAL_DIR = 'eval'
ATTN_DIR = 'attn'


def _run(command, config_file, out, data=None, seed=None, extra=None):
    args = [command, '--out', out]
    if config_file:
        args += ['--config', config_file]
    if data:
        args += ['--data', data]
    if seed is not None:
        args += ['--seed', str(seed)]
    args += extra or []
    code = main(parse_arguments(args))
    if code != 0:
        raise RuntimeError(f'"{command}" failed, see {os.path.join(out, "logs")} for details')
    return out


@task
def synthesize(config_file, out, seed):
    return _run('synth', config_file, os.path.join(out, SYNTH_DIR), seed=seed)


@task
def train(config_file, data, out, seed):
    return _run('train', config_file, os.path.join(out, TRAIN_DIR), data, seed)


@task
def evaluate(config_file, data, train_dir, out, split):
    return _run('eval', config_file, os.path.join(out, EVAL_DIR), data,
                extra=['--checkpoint', os.path.join(train_dir, 'final'), '--split', split])


@task
def attention(config_file, data, train_dir, out, split, top_k, level):
    return _run('attn', config_file, os.path.join(out, ATTN_DIR), data,
                extra=['--checkpoint', os.path.join(train_dir, 'final'), '--split', split,
                       '--top-k', str(top_k), '--level', level])


@flow(name="HATNet Train and Evaluate", log_prints=True)
def train_and_evaluate(
        out = "runs/hatnet",
        config_file = "config/synthetic.example.yml",
        data = None,
        seed = 0,
        split = "test",
        top_k = 50,
        level = "bag"
    ):
    """
    synth (when no dataset is given) -> train -> eval -> attn, each step writing under out
    """
    if not data:
        data = synthesize(config_file, out, seed)
    train_dir = train(config_file, data, out, seed)
    evaluate(config_file, data, train_dir, out, split)
    attention(config_file, data, train_dir, out, split, top_k, level)
    return out


if __name__ == "__main__":
    train_and_evaluate()
