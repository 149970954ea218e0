# -*- coding: utf-8 -*-

import setuptools
import pathlib


HERE = pathlib.Path(__file__).parent

# The text of the README file
long_description = (HERE / "README.md").read_text()

setuptools.setup(
    name="memprobe",
    version="0.1.0",
    description="Continual learning over frozen embeddings: exemplar memory, cluster-tree probes and zero-shot fusion",
    long_description=long_description,
    long_description_content_type="text/markdown",
    keywords="continual learning, zero-shot, embeddings, exemplar memory, knn, logistic regression, clustering tree",
    license="MIT",
    packages=["memprobe"],
    package_data={"memprobe": ["memprobe_config.yaml"]},
    install_requires=[
        "numpy>=1.22",
        "scipy>=1.15",
        "scikit-learn>=1.1",
        "pyyaml",
    ],
    extras_require={
        "develop": [
            "build",
            "twine",
            "mkdocs",
            "mkdocs-material",
        ],
    },
    zip_safe=False,
    include_package_data=True,
    classifiers=[
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.10",
    entry_points={
        "console_scripts": [
            "memprobe=memprobe.memprobe_cli:main",
        ],
    },
)
