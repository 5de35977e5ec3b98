import setuptools

with open('README.md', 'r') as fh:
    long_description = fh.read()

setuptools.setup(
    name='PLAdapt',
    version='0.1',
    scripts=[
        'pladapt',
    ],
    author='HSE.Bioinformatics',
    author_email='victor.o.novosad@gmail.com',
    description='Unsupervised domain adaptation for power-line segmentation with quad cross-attention',
    long_description=long_description,
    long_description_content_type='text/markdown',
    packages=setuptools.find_packages(exclude=['tests']),
    install_requires=[
        'numpy',
        'scipy',
        'scikit-learn',
        'pandas',
        'matplotlib',
        'seaborn',
        'tqdm',
    ],
    extras_require={
        'tests': ['pytest'],
    },
    classifiers=[
        'Programming Language :: Python :: 3',
        'License :: OSI Approved :: MIT License',
        'Operating System :: POSIX :: Linux',
        'Operating System :: Microsoft :: Windows',
        'Operating System :: MacOS',
    ],
)
