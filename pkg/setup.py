#!/usr/bin/env python

import os
from setuptools import setup


_package = 'relbias'


with open(os.path.join(_package, '__init__.py')) as fid:
    for line in fid:
        if line.startswith('__version__'):
            VERSION = line.strip().split()[-1][1:-1]
            break

with open('README.md', encoding='utf-8') as fid:
    LONG_DESCRIPTION = fid.read()

setup(name=_package,
    version=VERSION,
    author='The relbias authors',
    description='Relation prior debiasing: estimated-prior logit adjustment and certainty-aware ensembling',
    long_description=LONG_DESCRIPTION,
    long_description_content_type='text/markdown',
    license='GPL3.0',
    python_requires='>=3.8',

    install_requires=['numpy>=1.20', 'scipy>=1.6'],
    extras_require={'test': ['pytest>=6']},
    packages=[_package],
    entry_points={'console_scripts': ['relbias=relbias.cli:main']},
    )
